//! Per-camera clocks.
//!
//! Global time is measured in frames of the anchor camera. A detection in
//! frame `j` at image row `x₂` of camera `i` happened at
//! `α_i j + β_i + r_i x₂`.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::geometry::Point2;

/// Affine frame-to-global-time map plus rolling-shutter row delay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeModel {
    /// Global frames per local frame.
    pub alpha: f64,
    /// Offset in global frames.
    pub beta: f64,
    /// Global frames per image row; negative for bottom-to-top readout.
    pub rs_readout: f64,
}

impl TimeModel {
    pub const ANCHOR: TimeModel = TimeModel {
        alpha: 1.0,
        beta: 0.0,
        rs_readout: 0.0,
    };

    pub fn new(alpha: f64, beta: f64, rs_readout: f64) -> Self {
        Self {
            alpha,
            beta,
            rs_readout,
        }
    }

    /// Nominal model from frame rates: `α = fps_anchor / fps`, `β = 0`, `r = 0`.
    pub fn from_nominal_rates(anchor_fps: f64, fps: f64) -> Self {
        Self::new(anchor_fps / fps, 0.0, 0.0)
    }

    pub fn frame_to_time(&self, frame: f64) -> f64 {
        self.alpha * frame + self.beta
    }

    pub fn detection_time(&self, d: &Detection2D) -> f64 {
        self.frame_to_time(d.frame_index as f64) + self.rs_readout * d.row()
    }

    /// Largest admissible `|r|` for the given image height: a readout pass
    /// must fit in one frame interval.
    pub fn max_readout(&self, image_height: f64) -> f64 {
        self.alpha / image_height
    }

    pub fn is_valid(&self, image_height: f64) -> bool {
        self.alpha > 0.0
            && self.alpha.is_finite()
            && self.beta.is_finite()
            && self.rs_readout.abs() * image_height <= self.alpha * (1.0 + 1e-12)
    }

    /// Composes an affine correction `t ↦ scale·t + offset` onto this clock.
    pub fn corrected(&self, correction: &ClockCorrection) -> Self {
        Self {
            alpha: self.alpha * correction.scale,
            beta: self.beta * correction.scale + correction.offset,
            rs_readout: self.rs_readout * correction.scale,
        }
    }
}

/// Affine time correction `t ↦ scale·t + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClockCorrection {
    pub scale: f64,
    pub offset: f64,
}

impl ClockCorrection {
    pub const IDENTITY: ClockCorrection = ClockCorrection {
        scale: 1.0,
        offset: 0.0,
    };

    pub fn apply(&self, t: f64) -> f64 {
        self.scale * t + self.offset
    }

    /// `self ∘ inner`
    pub fn compose(&self, inner: &ClockCorrection) -> Self {
        Self {
            scale: self.scale * inner.scale,
            offset: self.scale * inner.offset + self.offset,
        }
    }

    pub fn inverse(&self) -> Self {
        Self {
            scale: 1.0 / self.scale,
            offset: -self.offset / self.scale,
        }
    }
}

/// One observed image position of the target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection2D {
    pub camera_id: usize,
    pub frame_index: i64,
    /// Pixel position `(x₁, x₂)`; `x₂` is the image row.
    pub pixel: Vector2<f64>,
    /// Undistorted normalized coordinates, filled at ingestion.
    pub normalized: Point2,
}

impl Detection2D {
    pub fn row(&self) -> f64 {
        self.pixel.y
    }
}

/// Checks that frame indices are non-negative and strictly increasing.
pub fn is_valid_track(track: &[Detection2D]) -> bool {
    track.iter().all(|d| d.frame_index >= 0)
        && track.windows(2).all(|w| w[0].frame_index < w[1].frame_index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(frame: i64, row: f64) -> Detection2D {
        Detection2D {
            camera_id: 0,
            frame_index: frame,
            pixel: Vector2::new(100.0, row),
            normalized: Vector2::zeros(),
        }
    }

    #[test]
    fn frame_to_time_examples() {
        assert_eq!(TimeModel::ANCHOR.frame_to_time(5.0), 5.0);
        assert_eq!(TimeModel::new(0.5, 2.0, 0.0).frame_to_time(10.0), 7.0);
        let tm = TimeModel::from_nominal_rates(30.0, 60.0);
        assert_eq!(tm.alpha, 0.5);
        assert_eq!(tm.frame_to_time(120.0), 60.0);
    }

    #[test]
    fn detection_time_examples() {
        let tm = TimeModel::new(0.7, 3.0, 0.0);
        let d = det(12, 800.0);
        assert_eq!(tm.detection_time(&d), tm.frame_to_time(12.0));
        let rs = TimeModel::new(1.0, 0.0, 1.0 / 1080.0);
        assert!((rs.detection_time(&det(3, 540.0)) - 3.5).abs() < 1e-15);
    }

    #[test]
    fn detection_time_matches_seconds_clock() {
        // anchor at 30 fps, camera at 25 fps started 0.4 s late, 1080 rows read
        // over the full frame interval. Compare against a clock in seconds.
        let anchor_fps = 30.0;
        let fps = 25.0;
        let start_s = 0.4;
        let tm = TimeModel::new(anchor_fps / fps, start_s * anchor_fps, anchor_fps / fps / 1080.0);
        for j in [0, 1, 17, 250] {
            for row in [0.0, 333.0, 1079.0] {
                let seconds = start_s + j as f64 / fps + row * (1.0 / fps) / 1080.0;
                let expected = seconds * anchor_fps;
                assert!((tm.detection_time(&det(j, row)) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn readout_bound() {
        let tm = TimeModel::new(1.0, 0.0, 1.0 / 1080.0);
        assert!(tm.is_valid(1080.0));
        assert!(!TimeModel::new(1.0, 0.0, 1.1 / 1080.0).is_valid(1080.0));
        assert!(TimeModel::new(1.0, 0.0, -1.0 / 1080.0).is_valid(1080.0));
        assert!(!TimeModel::new(0.0, 0.0, 0.0).is_valid(1080.0));
    }

    #[test]
    fn corrections_compose() {
        let a = ClockCorrection { scale: 1.01, offset: 3.0 };
        let b = ClockCorrection { scale: 0.98, offset: -1.5 };
        for t in [0.0, 10.0, -4.0] {
            assert!((a.compose(&b).apply(t) - a.apply(b.apply(t))).abs() < 1e-12);
            assert!((a.inverse().apply(a.apply(t)) - t).abs() < 1e-12);
        }
        let tm = TimeModel::new(0.5, 1.0, 0.001);
        let c = tm.corrected(&a);
        for j in [0.0, 7.0, 100.0] {
            assert!((c.frame_to_time(j) - a.apply(tm.frame_to_time(j))).abs() < 1e-12);
        }
    }

    #[test]
    fn track_validity() {
        assert!(is_valid_track(&[det(0, 1.0), det(2, 1.0)]));
        assert!(!is_valid_track(&[det(2, 1.0), det(2, 1.0)]));
        assert!(!is_valid_track(&[det(-1, 1.0)]));
    }

    proptest! {
        #[test]
        fn frame_to_time_strictly_increasing(alpha in 1e-3f64..10.0, beta in -1e3f64..1e3, j in -1000i64..1000) {
            let tm = TimeModel::new(alpha, beta, 0.0);
            prop_assert!(tm.frame_to_time((j + 1) as f64) > tm.frame_to_time(j as f64));
        }

        #[test]
        fn rs_delay_within_one_readout(alpha in 0.1f64..4.0, frac in -1.0f64..1.0, row in 0.0f64..1080.0, j in 0i64..5000) {
            let h = 1080.0;
            let r = frac * alpha / h;
            let tm = TimeModel::new(alpha, 2.5, r);
            let d = det(j, row);
            let delay = tm.detection_time(&d) - tm.frame_to_time(j as f64);
            let lo = (r * h).min(0.0) - 1e-9;
            let hi = (r * h).max(0.0) + 1e-9;
            prop_assert!(delay >= lo && delay <= hi);
        }
    }
}
