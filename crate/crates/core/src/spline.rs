//! Clamped uniform cubic B-splines over global time, and the piecewise 3D
//! trajectory model built from them.

use nalgebra::{DMatrix, SVector, Vector3};
use thiserror::Error;

pub const DEGREE: usize = 3;
const ORDER: usize = DEGREE + 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplineError {
    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("sample span {span} is shorter than the knot spacing {spacing}")]
    SpanTooShort { span: f64, spacing: f64 },
    #[error("samples are not sorted by time or contain non-finite values")]
    InvalidSamples,
    #[error("least-squares system is ill-conditioned: {0}")]
    IllConditioned(String),
    #[error("time {t} outside valid interval [{t_min}, {t_max}]")]
    OutOfRange { t: f64, t_min: f64, t_max: f64 },
    #[error("derivative order {0} is not supported (only 1 and 2)")]
    UnsupportedOrder(u8),
}

/// Values and first two derivatives of the four cubic basis functions that
/// are non-zero at a given time, together with the index of the first one.
#[derive(Debug, Clone, Copy)]
pub struct BasisEval {
    pub first: usize,
    /// `values[k][m]` is the k-th derivative of basis `first + m`.
    pub values: [[f64; ORDER]; 3],
}

/// A clamped uniform cubic B-spline curve in `D` dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseSpline<const D: usize> {
    knots: Vec<f64>,
    coefficients: Vec<SVector<f64, D>>,
    fit_rms: f64,
}

pub type Spline2 = PiecewiseSpline<2>;
pub type Spline3 = PiecewiseSpline<3>;

fn clamped_uniform_knots(t_min: f64, t_max: f64, spans: usize) -> Vec<f64> {
    let mut knots = Vec::with_capacity(spans + 2 * DEGREE + 1);
    knots.extend(std::iter::repeat_n(t_min, DEGREE));
    let h = (t_max - t_min) / spans as f64;
    for i in 0..spans {
        knots.push(t_min + h * i as f64);
    }
    knots.extend(std::iter::repeat_n(t_max, ORDER));
    knots
}

/// Basis functions and their derivatives (up to order 2) on knot span `span`.
/// Evaluating outside the span returns the span's polynomial continuation.
fn basis_derivatives(knots: &[f64], span: usize, t: f64) -> [[f64; ORDER]; 3] {
    let p = DEGREE;
    let mut ndu = [[0.0; ORDER]; ORDER];
    let mut left = [0.0; ORDER];
    let mut right = [0.0; ORDER];
    ndu[0][0] = 1.0;
    for j in 1..=p {
        left[j] = t - knots[span + 1 - j];
        right[j] = knots[span + j] - t;
        let mut saved = 0.0;
        for r in 0..j {
            ndu[j][r] = right[r + 1] + left[j - r];
            let temp = ndu[r][j - 1] / ndu[j][r];
            ndu[r][j] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        ndu[j][j] = saved;
    }
    let mut ders = [[0.0; ORDER]; 3];
    for j in 0..=p {
        ders[0][j] = ndu[j][p];
    }
    let mut a = [[0.0; ORDER]; 2];
    for r in 0..=p {
        let (mut s1, mut s2) = (0usize, 1usize);
        a[0][0] = 1.0;
        for k in 1..=2usize {
            let mut d = 0.0;
            let rk = r as isize - k as isize;
            let pk = p - k;
            if rk >= 0 {
                a[s2][0] = a[s1][0] / ndu[pk + 1][rk as usize];
                d = a[s2][0] * ndu[rk as usize][pk];
            }
            let j1: usize = if rk >= -1 { 1 } else { (-rk) as usize };
            let j2: usize = if r as isize - 1 <= pk as isize { k - 1 } else { p - r };
            for j in j1..=j2 {
                let idx = (rk + j as isize) as usize;
                a[s2][j] = (a[s1][j] - a[s1][j - 1]) / ndu[pk + 1][idx];
                d += a[s2][j] * ndu[idx][pk];
            }
            if r <= pk {
                a[s2][k] = -a[s1][k - 1] / ndu[pk + 1][r];
                d += a[s2][k] * ndu[r][pk];
            }
            ders[k][r] = d;
            std::mem::swap(&mut s1, &mut s2);
        }
    }
    let mut factor = p as f64;
    for (k, row) in ders.iter_mut().enumerate().skip(1) {
        for v in row.iter_mut() {
            *v *= factor;
        }
        factor *= (p - k) as f64;
    }
    ders
}

impl<const D: usize> PiecewiseSpline<D> {
    /// Least-squares fit with uniform knots roughly `knot_spacing` apart.
    pub fn fit(samples: &[(f64, SVector<f64, D>)], knot_spacing: f64) -> Result<Self, SplineError> {
        validate_samples(samples)?;
        let span = samples[samples.len() - 1].0 - samples[0].0;
        if !(knot_spacing > 0.0) || span < knot_spacing * (1.0 - 1e-9) {
            return Err(SplineError::SpanTooShort {
                span,
                spacing: knot_spacing,
            });
        }
        let spans = ((span / knot_spacing).round() as usize).max(1);
        Self::fit_with_spans(samples, spans)
    }

    /// Least-squares fit with a prescribed number of uniform knot spans.
    pub fn fit_with_spans(
        samples: &[(f64, SVector<f64, D>)],
        spans: usize,
    ) -> Result<Self, SplineError> {
        validate_samples(samples)?;
        let n_ctrl = spans + DEGREE;
        if samples.len() < n_ctrl {
            return Err(SplineError::InsufficientSamples {
                needed: n_ctrl,
                got: samples.len(),
            });
        }
        let t_min = samples[0].0;
        let t_max = samples[samples.len() - 1].0;
        if !(t_max > t_min) {
            return Err(SplineError::IllConditioned("zero time span".into()));
        }
        let mut spline = Self {
            knots: clamped_uniform_knots(t_min, t_max, spans),
            coefficients: vec![SVector::zeros(); n_ctrl],
            fit_rms: 0.0,
        };

        let mut support = vec![0usize; spans];
        let mut normal = DMatrix::<f64>::zeros(n_ctrl, n_ctrl);
        let mut rhs = DMatrix::<f64>::zeros(n_ctrl, D);
        for (t, p) in samples {
            let b = spline.basis(*t);
            support[b.first] += 1;
            for i in 0..ORDER {
                for j in 0..ORDER {
                    normal[(b.first + i, b.first + j)] += b.values[0][i] * b.values[0][j];
                }
                for d in 0..D {
                    rhs[(b.first + i, d)] += b.values[0][i] * p[d];
                }
            }
        }
        if let Some(empty) = support.iter().position(|&c| c == 0) {
            return Err(SplineError::IllConditioned(format!(
                "knot span {empty} has no supporting samples"
            )));
        }
        let chol = normal
            .cholesky()
            .ok_or_else(|| SplineError::IllConditioned("normal matrix not positive definite".into()))?;
        let diag = chol.l_dirty().diagonal();
        let (lo, hi) = diag
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
        if (lo / hi).powi(2) < 1e-13 {
            return Err(SplineError::IllConditioned(format!(
                "normal matrix condition estimate {:e}",
                (hi / lo).powi(2)
            )));
        }
        let sol = chol.solve(&rhs);
        for (i, c) in spline.coefficients.iter_mut().enumerate() {
            for d in 0..D {
                c[d] = sol[(i, d)];
            }
        }
        let sq: f64 = samples
            .iter()
            .map(|(t, p)| (spline.eval_extended(*t) - p).norm_squared())
            .sum();
        spline.fit_rms = (sq / samples.len() as f64).sqrt();
        Ok(spline)
    }

    pub fn from_parts(
        t_min: f64,
        t_max: f64,
        coefficients: Vec<SVector<f64, D>>,
    ) -> Result<Self, SplineError> {
        if coefficients.len() < ORDER {
            return Err(SplineError::InsufficientSamples {
                needed: ORDER,
                got: coefficients.len(),
            });
        }
        if !(t_max > t_min) {
            return Err(SplineError::IllConditioned("zero time span".into()));
        }
        let spans = coefficients.len() - DEGREE;
        Ok(Self {
            knots: clamped_uniform_knots(t_min, t_max, spans),
            coefficients,
            fit_rms: 0.0,
        })
    }

    pub fn t_min(&self) -> f64 {
        self.knots[0]
    }

    pub fn t_max(&self) -> f64 {
        self.knots[self.knots.len() - 1]
    }

    pub fn valid_interval(&self) -> (f64, f64) {
        (self.t_min(), self.t_max())
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.t_min() && t <= self.t_max()
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn num_spans(&self) -> usize {
        self.coefficients.len() - DEGREE
    }

    pub fn knot_spacing(&self) -> f64 {
        (self.t_max() - self.t_min()) / self.num_spans() as f64
    }

    pub fn coefficients(&self) -> &[SVector<f64, D>] {
        &self.coefficients
    }

    pub fn set_coefficients(&mut self, coefficients: Vec<SVector<f64, D>>) {
        assert_eq!(coefficients.len(), self.coefficients.len());
        self.coefficients = coefficients;
    }

    /// RMS residual of the least-squares fit that produced this spline.
    pub fn fit_rms(&self) -> f64 {
        self.fit_rms
    }

    fn span_index(&self, t: f64) -> usize {
        let lo = DEGREE;
        let hi = self.coefficients.len() - 1;
        let h = self.knot_spacing();
        let guess = DEGREE as isize + ((t - self.t_min()) / h).floor() as isize;
        let mut s = guess.clamp(lo as isize, hi as isize) as usize;
        while s > lo && self.knots[s] > t {
            s -= 1;
        }
        while s < hi && self.knots[s + 1] <= t {
            s += 1;
        }
        s
    }

    /// Non-zero basis functions at `t`. Outside the valid interval the end
    /// spans are continued polynomially; callers must range-check.
    pub fn basis(&self, t: f64) -> BasisEval {
        let span = self.span_index(t);
        BasisEval {
            first: span - DEGREE,
            values: basis_derivatives(&self.knots, span, t),
        }
    }

    fn combine(&self, b: &BasisEval, order: usize) -> SVector<f64, D> {
        let mut out = SVector::zeros();
        for m in 0..ORDER {
            out += self.coefficients[b.first + m] * b.values[order][m];
        }
        out
    }

    fn check_range(&self, t: f64) -> Result<(), SplineError> {
        if self.contains(t) {
            Ok(())
        } else {
            Err(SplineError::OutOfRange {
                t,
                t_min: self.t_min(),
                t_max: self.t_max(),
            })
        }
    }

    pub fn eval(&self, t: f64) -> Result<SVector<f64, D>, SplineError> {
        self.check_range(t)?;
        Ok(self.eval_extended(t))
    }

    pub fn eval_derivative(&self, t: f64, order: u8) -> Result<SVector<f64, D>, SplineError> {
        if !(1..=2).contains(&order) {
            return Err(SplineError::UnsupportedOrder(order));
        }
        self.check_range(t)?;
        Ok(self.combine(&self.basis(t), order as usize))
    }

    /// Evaluation without the range check; beyond the ends the boundary span
    /// polynomial is continued.
    pub(crate) fn eval_extended(&self, t: f64) -> SVector<f64, D> {
        self.combine(&self.basis(t), 0)
    }

    pub(crate) fn eval_extended_with_velocity(&self, t: f64) -> (SVector<f64, D>, SVector<f64, D>) {
        let b = self.basis(t);
        (self.combine(&b, 0), self.combine(&b, 1))
    }
}

fn validate_samples<const D: usize>(samples: &[(f64, SVector<f64, D>)]) -> Result<(), SplineError> {
    if samples.len() < ORDER {
        return Err(SplineError::InsufficientSamples {
            needed: ORDER,
            got: samples.len(),
        });
    }
    let finite = samples
        .iter()
        .all(|(t, p)| t.is_finite() && p.iter().all(|v| v.is_finite()));
    let sorted = samples.windows(2).all(|w| w[0].0 <= w[1].0);
    if finite && sorted {
        Ok(())
    } else {
        Err(SplineError::InvalidSamples)
    }
}

/// A time-stamped 3D position.
pub type TimedPoint = (f64, Vector3<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySegment {
    pub spline: Spline3,
    samples: Vec<TimedPoint>,
}

impl TrajectorySegment {
    pub fn samples(&self) -> &[TimedPoint] {
        &self.samples
    }
}

/// What an `extend_or_merge` call changed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MergeSummary {
    pub kept: usize,
    pub refitted: usize,
    pub pending: usize,
}

/// Ordered, non-overlapping 3D spline segments with honest gaps between them.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryModel {
    knot_spacing: f64,
    segments: Vec<TrajectorySegment>,
    pending: Vec<TimedPoint>,
}

/// Samples separated by more than this many knot spacings start a new segment.
pub const GAP_KNOT_SPACINGS: f64 = 2.0;

#[derive(Clone, Copy, PartialEq)]
enum Origin {
    Segment(usize),
    Fresh,
}

impl TrajectoryModel {
    pub fn new(knot_spacing: f64) -> Self {
        assert!(knot_spacing > 0.0);
        Self {
            knot_spacing,
            segments: Vec::new(),
            pending: Vec::new(),
        }
    }

    pub fn knot_spacing(&self) -> f64 {
        self.knot_spacing
    }

    pub fn segments(&self) -> &[TrajectorySegment] {
        &self.segments
    }

    /// Samples too sparse to be fitted yet.
    pub fn pending(&self) -> &[TimedPoint] {
        &self.pending
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Index of the segment whose closed interval contains `t`.
    pub fn segment_at(&self, t: f64) -> Option<usize> {
        let idx = self.segments.partition_point(|s| s.spline.t_max() < t);
        (idx < self.segments.len() && self.segments[idx].spline.contains(t)).then_some(idx)
    }

    pub fn covers(&self, t: f64) -> bool {
        self.segment_at(t).is_some()
    }

    pub fn eval(&self, t: f64) -> Result<Vector3<f64>, SplineError> {
        match self.segment_at(t) {
            Some(i) => self.segments[i].spline.eval(t),
            None => Err(SplineError::OutOfRange {
                t,
                t_min: self.segments.first().map_or(f64::NAN, |s| s.spline.t_min()),
                t_max: self.segments.last().map_or(f64::NAN, |s| s.spline.t_max()),
            }),
        }
    }

    /// Total covered global time.
    pub fn covered_duration(&self) -> f64 {
        self.segments
            .iter()
            .map(|s| s.spline.t_max() - s.spline.t_min())
            .sum()
    }

    /// Uncovered ranges between consecutive segments.
    pub fn gaps(&self) -> Vec<(f64, f64)> {
        self.segments
            .windows(2)
            .map(|w| (w[0].spline.t_max(), w[1].spline.t_min()))
            .collect()
    }

    /// Positions at every multiple of `step` inside the covered intervals.
    pub fn sample_grid(&self, step: f64) -> Vec<TimedPoint> {
        let mut out = Vec::new();
        for seg in &self.segments {
            let (a, b) = seg.spline.valid_interval();
            let mut k = (a / step).ceil() as i64;
            while (k as f64) * step <= b {
                let t = k as f64 * step;
                out.push((t, seg.spline.eval_extended(t)));
                k += 1;
            }
        }
        out
    }

    /// Replaces a segment's control points (e.g. after bundle adjustment). The
    /// stored samples are moved onto the new curve.
    pub fn set_segment_coefficients(&mut self, index: usize, coefficients: Vec<Vector3<f64>>) {
        let seg = &mut self.segments[index];
        seg.spline.set_coefficients(coefficients);
        for (t, p) in seg.samples.iter_mut() {
            *p = seg.spline.eval_extended(*t);
        }
    }

    /// Adds samples. Samples in gaps create or extend segments, samples
    /// overlapping a segment trigger a refit of it with the pooled samples,
    /// and clusters too short to fit are kept pending.
    pub fn extend_or_merge(&mut self, new_samples: &[TimedPoint]) -> MergeSummary {
        let mut pooled: Vec<(f64, Vector3<f64>, Origin)> = Vec::new();
        for (i, seg) in self.segments.iter().enumerate() {
            pooled.extend(seg.samples.iter().map(|(t, p)| (*t, *p, Origin::Segment(i))));
        }
        pooled.extend(self.pending.iter().map(|(t, p)| (*t, *p, Origin::Fresh)));
        pooled.extend(
            new_samples
                .iter()
                .filter(|(t, p)| t.is_finite() && p.iter().all(|v| v.is_finite()))
                .map(|(t, p)| (*t, *p, Origin::Fresh)),
        );
        pooled.sort_by(|a, b| a.0.total_cmp(&b.0));

        let gap = GAP_KNOT_SPACINGS * self.knot_spacing;
        let mut segments = Vec::new();
        let mut pending = Vec::new();
        let mut summary = MergeSummary::default();
        let mut start = 0;
        for end in 1..=pooled.len() {
            if end < pooled.len() && pooled[end].0 - pooled[end - 1].0 <= gap {
                continue;
            }
            let cluster = &pooled[start..end];
            start = end;
            if let Origin::Segment(i) = cluster[0].2 {
                let unchanged = cluster.iter().all(|c| c.2 == Origin::Segment(i))
                    && cluster.len() == self.segments[i].samples.len();
                if unchanged {
                    segments.push(self.segments[i].clone());
                    summary.kept += 1;
                    continue;
                }
            }
            let points: Vec<TimedPoint> = cluster.iter().map(|c| (c.0, c.1)).collect();
            let before = segments.len();
            self.fit_cluster(points, &mut segments, &mut pending);
            summary.refitted += segments.len() - before;
        }
        summary.pending = pending.len();
        self.segments = segments;
        self.pending = pending;
        summary
    }

    fn fit_cluster(
        &self,
        points: Vec<TimedPoint>,
        segments: &mut Vec<TrajectorySegment>,
        pending: &mut Vec<TimedPoint>,
    ) {
        let span = points.last().map_or(0.0, |p| p.0) - points.first().map_or(0.0, |p| p.0);
        if points.len() < ORDER || span < self.knot_spacing {
            pending.extend(points);
            return;
        }
        match Spline3::fit(&points, self.knot_spacing) {
            Ok(spline) => segments.push(TrajectorySegment {
                spline,
                samples: points,
            }),
            Err(_) => {
                // split at the widest internal gap and try both halves
                let split = points
                    .windows(2)
                    .enumerate()
                    .max_by(|a, b| (a.1[1].0 - a.1[0].0).total_cmp(&(b.1[1].0 - b.1[0].0)))
                    .filter(|(_, w)| w[1].0 > w[0].0)
                    .map(|(i, _)| i + 1);
                match split {
                    Some(k) => {
                        let mut left = points;
                        let right = left.split_off(k);
                        self.fit_cluster(left, segments, pending);
                        self.fit_cluster(right, segments, pending);
                    }
                    None => pending.extend(points),
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, Vector2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_fn<const D: usize>(
        ts: impl Iterator<Item = f64>,
        f: impl Fn(f64) -> SVector<f64, D>,
    ) -> Vec<(f64, SVector<f64, D>)> {
        ts.map(|t| (t, f(t))).collect()
    }

    #[test]
    fn fit_reproduces_affine_motion() {
        let a = Vector3::new(1.0, -2.0, 3.0);
        let b = Vector3::new(0.5, 0.25, -0.1);
        let samples = sample_fn((0..60).map(|i| i as f64 * 0.7 + 3.0), |t| a + b * t);
        let s = Spline3::fit(&samples, 5.0).unwrap();
        for k in 0..200 {
            let t = 3.0 + k as f64 * (59.0 * 0.7) / 199.0;
            assert!((s.eval(t).unwrap() - (a + b * t)).norm() < 1e-10);
            assert!((s.eval_derivative(t, 1).unwrap() - b).norm() < 1e-10);
            assert!(s.eval_derivative(t, 2).unwrap().norm() < 1e-10);
        }
    }

    #[test]
    fn fit_reproduces_cubic_polynomial() {
        let f = |t: f64| Vector2::new(0.3 - 0.2 * t + 0.05 * t * t - 0.001 * t * t * t, 1.0 + 0.01 * t.powi(3));
        let samples = sample_fn((0..40).map(|i| i as f64), f);
        let s = Spline2::fit(&samples, 5.0).unwrap();
        for k in 0..100 {
            let t = 0.123 + k as f64 * 0.38;
            let rel = (s.eval(t).unwrap() - f(t)).norm() / f(t).norm();
            assert!(rel < 1e-9, "t={t} rel={rel}");
        }
    }

    #[test]
    fn too_few_samples() {
        let samples = sample_fn((0..3).map(|i| i as f64 * 5.0), |t| Vector2::new(t, t));
        assert!(matches!(
            Spline2::fit(&samples, 1.0),
            Err(SplineError::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn empty_span_is_ill_conditioned() {
        let ts = (0..10).map(|i| i as f64).chain((0..10).map(|i| 30.0 + i as f64));
        let samples = sample_fn(ts, |t| Vector2::new(t, 1.0));
        assert!(matches!(
            Spline2::fit(&samples, 3.0),
            Err(SplineError::IllConditioned(_))
        ));
    }

    #[test]
    fn out_of_range_and_unsupported_order() {
        let samples = sample_fn((0..20).map(|i| i as f64), |t| Vector2::new(t, -t));
        let s = Spline2::fit(&samples, 5.0).unwrap();
        assert!(matches!(s.eval(-0.01), Err(SplineError::OutOfRange { .. })));
        assert!(matches!(s.eval(19.01), Err(SplineError::OutOfRange { .. })));
        assert_eq!(s.eval_derivative(3.0, 3), Err(SplineError::UnsupportedOrder(3)));
        assert_eq!(s.eval_derivative(3.0, 0), Err(SplineError::UnsupportedOrder(0)));
    }

    #[test]
    fn interval_ends_are_clamped_control_points() {
        let samples = sample_fn((0..30).map(|i| i as f64), |t| Vector2::new(t.sin(), t.cos()));
        let s = Spline2::fit(&samples, 4.0).unwrap();
        let first = s.eval(s.t_min()).unwrap();
        let last = s.eval(s.t_max()).unwrap();
        assert!((first - s.coefficients()[0]).norm() < 1e-12);
        assert!((last - s.coefficients()[s.coefficients().len() - 1]).norm() < 1e-12);
    }

    #[test]
    fn eval_at_samples_within_fit_residual() {
        let samples = sample_fn((0..12).map(|i| i as f64), |t| Vector2::new(t.sin(), 0.1 * t));
        let s = Spline2::fit_with_spans(&samples, 9).unwrap();
        for (t, p) in &samples {
            let r = (s.eval(*t).unwrap() - p).norm();
            assert!(r <= s.fit_rms() * (samples.len() as f64).sqrt() + 1e-12);
        }
    }

    #[test]
    fn falling_body_acceleration() {
        let g = -9.81 / 900.0;
        let samples = sample_fn((0..50).map(|i| i as f64), |t| Vector3::new(0.0, 0.0, 0.5 * g * t * t));
        let s = Spline3::fit(&samples, 5.0).unwrap();
        for t in [0.0, 1.3, 25.0, 49.0] {
            assert!((s.eval_derivative(t, 2).unwrap().z - g).abs() < 1e-8);
        }
    }

    #[test]
    fn analytic_derivatives_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..1000 {
            let n = rng.random_range(4..15);
            let coeffs: Vec<Vector3<f64>> = (0..n)
                .map(|_| Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)))
                .collect();
            let t0 = rng.random_range(-50.0..50.0);
            let len = rng.random_range(5.0..60.0);
            let s = Spline3::from_parts(t0, t0 + len, coeffs).unwrap();
            let h = 1e-4;
            let t = rng.random_range(t0 + h..t0 + len - h);
            let fd1 = (s.eval(t + h).unwrap() - s.eval(t - h).unwrap()) / (2.0 * h);
            let d1 = s.eval_derivative(t, 1).unwrap();
            assert!((fd1 - d1).norm() <= 1e-6 * d1.norm().max(1.0), "{fd1:?} vs {d1:?}");
            let fd2 = (s.eval_derivative(t + h, 1).unwrap() - s.eval_derivative(t - h, 1).unwrap()) / (2.0 * h);
            let d2 = s.eval_derivative(t, 2).unwrap();
            assert!((fd2 - d2).norm() <= 1e-6 * d2.norm().max(1.0), "{fd2:?} vs {d2:?}");
        }
    }

    #[test]
    fn fit_is_equivariant_under_rigid_maps() {
        let f = |t: f64| Vector3::new((0.1 * t).sin() * 20.0, (0.07 * t).cos() * 10.0, 0.02 * t * t);
        let samples = sample_fn((0..80).map(|i| i as f64 * 0.9), f);
        let rot = Rotation3::from_euler_angles(0.3, -0.2, 1.1);
        let v = Vector3::new(5.0, -3.0, 100.0);
        let moved: Vec<_> = samples.iter().map(|(t, p)| (*t, rot * p + v)).collect();
        let a = Spline3::fit(&samples, 5.0).unwrap();
        let b = Spline3::fit(&moved, 5.0).unwrap();
        for k in 0..50 {
            let t = k as f64 * 1.4;
            let pa = rot * a.eval(t).unwrap() + v;
            assert!((pa - b.eval(t).unwrap()).norm() < 1e-9);
        }
    }

    fn burst(t0: f64, n: usize, step: f64) -> Vec<TimedPoint> {
        (0..n)
            .map(|i| {
                let t = t0 + i as f64 * step;
                (t, Vector3::new(t.sin(), t.cos(), 0.1 * t))
            })
            .collect()
    }

    #[test]
    fn trajectory_from_single_burst() {
        let mut traj = TrajectoryModel::new(5.0);
        traj.extend_or_merge(&burst(0.0, 100, 1.0));
        assert_eq!(traj.segments().len(), 1);
        assert_eq!(traj.segments()[0].spline.valid_interval(), (0.0, 99.0));
        assert!(traj.gaps().is_empty());
    }

    #[test]
    fn trajectory_two_bursts_leave_gap() {
        let mut traj = TrajectoryModel::new(5.0);
        let mut samples = burst(0.0, 40, 1.0);
        samples.extend(burst(60.0, 40, 1.0));
        traj.extend_or_merge(&samples);
        assert_eq!(traj.segments().len(), 2);
        assert_eq!(traj.gaps(), vec![(39.0, 60.0)]);
        assert!(traj.eval(50.0).is_err());
        assert!(traj.eval(39.0).is_ok());
    }

    #[test]
    fn trajectory_refit_does_not_increase_pooled_residual() {
        let mut traj = TrajectoryModel::new(5.0);
        traj.extend_or_merge(&burst(0.0, 100, 1.0));
        let overlap: Vec<TimedPoint> = burst(20.5, 30, 1.0)
            .into_iter()
            .map(|(t, p)| (t, p + Vector3::new(0.01, -0.02, 0.005)))
            .collect();
        let mut pooled = traj.segments()[0].samples().to_vec();
        pooled.extend(overlap.iter().copied());
        let rms = |tr: &TrajectoryModel| {
            let sq: f64 = pooled.iter().map(|(t, p)| (tr.eval(*t).unwrap() - p).norm_squared()).sum();
            (sq / pooled.len() as f64).sqrt()
        };
        let before = rms(&traj);
        let summary = traj.extend_or_merge(&overlap);
        assert_eq!(summary.refitted, 1);
        assert_eq!(traj.segments().len(), 1);
        assert!(rms(&traj) <= before + 1e-9);
    }

    #[test]
    fn isolated_samples_are_buffered() {
        let mut traj = TrajectoryModel::new(5.0);
        traj.extend_or_merge(&burst(0.0, 3, 1.0));
        assert!(traj.is_empty());
        assert_eq!(traj.pending().len(), 3);
        traj.extend_or_merge(&burst(3.0, 20, 1.0));
        assert_eq!(traj.segments().len(), 1);
        assert!(traj.pending().is_empty());
        assert_eq!(traj.segments()[0].spline.t_min(), 0.0);
    }

    #[test]
    fn unchanged_segments_are_kept() {
        let mut traj = TrajectoryModel::new(5.0);
        traj.extend_or_merge(&burst(0.0, 40, 1.0));
        let seg = traj.segments()[0].clone();
        let summary = traj.extend_or_merge(&burst(100.0, 40, 1.0));
        assert_eq!(summary.kept, 1);
        assert_eq!(traj.segments()[0], seg);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn segments_never_overlap(bursts in proptest::collection::vec((0.0f64..400.0, 1usize..40, 0.2f64..3.0), 1..8)) {
            let mut traj = TrajectoryModel::new(5.0);
            for (t0, n, step) in bursts {
                traj.extend_or_merge(&burst(t0, n, step));
                for w in traj.segments().windows(2) {
                    prop_assert!(w[0].spline.t_max() < w[1].spline.t_min());
                }
            }
        }
    }
}
