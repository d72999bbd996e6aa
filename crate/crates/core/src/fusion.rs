//! Inertial dead reckoning and the visual/inertial cross-check.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{argmax_pose, heading_angle, DiscretePose, PoseBelief};
use crate::scene::{Delta, ImuModel};

/// Gate thresholds: `gamma_pos` in cells, `gamma_heading` in levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub gamma_pos: f64,
    pub gamma_heading: f64,
}

impl FusionConfig {
    pub fn new(gamma_pos: f64, gamma_heading: f64) -> Result<Self> {
        if !(gamma_pos > 0.0 && gamma_heading > 0.0) {
            return Err(Error::Config(format!(
                "fusion gates must be positive, got {gamma_pos} / {gamma_heading}"
            )));
        }
        Ok(Self {
            gamma_pos,
            gamma_heading,
        })
    }

    /// Per-step noise envelope of the IMU: three sigmas plus bias.
    pub fn from_imu(model: &ImuModel, orientations: usize) -> Self {
        let levels_per_rad = orientations as f64 / TAU;
        Self {
            gamma_pos: (3.0 * model.sigma_pos + model.bias_pos.abs()).max(f64::EPSILON),
            gamma_heading: ((3.0 * model.sigma_theta + model.bias_theta.abs()) * levels_per_rad)
                .max(f64::EPSILON),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoseSource {
    Visual,
    Inertial,
}

impl PoseSource {
    pub fn name(self) -> &'static str {
        match self {
            PoseSource::Visual => "visual",
            PoseSource::Inertial => "inertial",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutcome {
    pub pose: DiscretePose,
    pub belief: PoseBelief,
    pub source: PoseSource,
}

/// Applies an egocentric displacement to `prev`: the planar part is rotated
/// by the heading of `prev`, added, rounded to the nearest cell and clamped
/// to the grid; the turn is rounded to whole levels and wraps modulo `R`.
pub fn dead_reckon(
    prev: DiscretePose,
    u: Delta,
    orientations: usize,
    height: usize,
    width: usize,
) -> DiscretePose {
    let theta = heading_angle(prev.r, orientations);
    let (c, s) = (theta.cos(), theta.sin());
    let wx = u.dx * c - u.dy * s;
    let wy = u.dx * s + u.dy * c;
    let clamp = |v: f64, n: usize| -> usize { v.round().clamp(0.0, (n - 1) as f64) as usize };
    let x = clamp(prev.x as f64 + wx, height);
    let y = clamp(prev.y as f64 + wy, width);
    let turn = (u.dtheta * orientations as f64 / TAU).round() as i64;
    let r = (prev.r as i64 + turn).rem_euclid(orientations as i64) as usize;
    DiscretePose { r, x, y }
}

/// `min(d, R - d)` for level difference `d`.
pub fn circular_level_distance(a: usize, b: usize, orientations: usize) -> usize {
    let d = a.abs_diff(b) % orientations;
    d.min(orientations - d)
}

/// Accepts the visual pose iff it is strictly within both gates of the
/// inertial pose.
pub fn cross_check(
    visual: DiscretePose,
    inertial: DiscretePose,
    orientations: usize,
    cfg: &FusionConfig,
) -> PoseSource {
    let dx = visual.x as f64 - inertial.x as f64;
    let dy = visual.y as f64 - inertial.y as f64;
    let pos = (dx * dx + dy * dy).sqrt();
    let rot = circular_level_distance(visual.r, inertial.r, orientations) as f64;
    if pos < cfg.gamma_pos && rot < cfg.gamma_heading {
        PoseSource::Visual
    } else {
        PoseSource::Inertial
    }
}

/// Keeps the visual belief as-is, or replaces it by a one-hot tensor at the
/// inertial pose.
pub fn select_belief(visual: PoseBelief, inertial: DiscretePose, source: PoseSource) -> FusionOutcome {
    match source {
        PoseSource::Visual => FusionOutcome {
            pose: argmax_pose(&visual),
            belief: visual,
            source,
        },
        PoseSource::Inertial => {
            let g = visual.grid();
            FusionOutcome {
                pose: inertial,
                belief: PoseBelief::one_hot(g.channels(), g.height(), g.width(), inertial),
                source,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Grid3;
    use proptest::prelude::*;

    #[test]
    fn dead_reckon_examples() {
        let p = DiscretePose::new(0, 5, 5);
        assert_eq!(dead_reckon(p, Delta::default(), 8, 10, 10), p);
        let u = Delta { dx: 2.0, dy: 0.0, dtheta: 0.0 };
        assert_eq!(dead_reckon(p, u, 8, 10, 10), DiscretePose::new(0, 7, 5));
        // facing +y, "ahead" moves the column
        assert_eq!(dead_reckon(DiscretePose::new(2, 5, 5), u, 8, 10, 10), DiscretePose::new(2, 5, 7));
        let turn = Delta { dx: 0.0, dy: 0.0, dtheta: TAU / 360.0 };
        assert_eq!(dead_reckon(DiscretePose::new(359, 1, 1), turn, 360, 4, 4).r, 0);
        // clamped at the border
        let far = Delta { dx: -20.0, dy: 30.0, dtheta: 0.0 };
        assert_eq!(dead_reckon(p, far, 8, 10, 12), DiscretePose::new(0, 0, 11));
    }

    #[test]
    fn gate_truth_table() {
        let cfg = FusionConfig::new(2.0, 5.0).unwrap();
        let a = DiscretePose::new(10, 4, 4);
        assert_eq!(cross_check(a, a, 360, &cfg), PoseSource::Visual);
        assert_eq!(cross_check(DiscretePose::new(10, 14, 4), a, 360, &cfg), PoseSource::Inertial);
        assert_eq!(cross_check(DiscretePose::new(359, 4, 5), DiscretePose::new(0, 4, 4), 360, &cfg), PoseSource::Visual);
        assert_eq!(cross_check(DiscretePose::new(16, 4, 4), a, 360, &cfg), PoseSource::Inertial);
        // strict inequality at both gates
        assert_eq!(cross_check(DiscretePose::new(10, 6, 4), a, 360, &cfg), PoseSource::Inertial);
        assert_eq!(cross_check(DiscretePose::new(15, 4, 4), a, 360, &cfg), PoseSource::Inertial);
        assert!(FusionConfig::new(0.0, 1.0).is_err());
    }

    #[test]
    fn gates_from_imu_model() {
        let m = ImuModel { sigma_pos: 0.4, bias_pos: 0.25, sigma_theta: 0.1, bias_theta: 0.05, seed: 0 };
        let cfg = FusionConfig::from_imu(&m, 8);
        assert!((cfg.gamma_pos - 1.45).abs() < 1e-12);
        assert!((cfg.gamma_heading - 0.35 * 8.0 / TAU).abs() < 1e-12);
    }

    #[test]
    fn select_belief_variants() {
        let mut g = Grid3::zeros(2, 3, 4);
        g.set(1, 2, 3, 0.75);
        g.set(0, 0, 0, 0.25);
        let v = PoseBelief::from_grid(g).unwrap();
        let out = select_belief(v.clone(), DiscretePose::new(0, 1, 1), PoseSource::Visual);
        assert_eq!(out.belief, v);
        assert_eq!(out.pose, DiscretePose::new(1, 2, 3));
        let out = select_belief(v, DiscretePose::new(1, 2, 3), PoseSource::Inertial);
        assert_eq!(out.belief.prob(DiscretePose::new(1, 2, 3)), 1.0);
        assert_eq!(out.belief.total(), 1.0);
        assert_eq!(out.pose, DiscretePose::new(1, 2, 3));
    }

    proptest! {
        #[test]
        fn gate_is_symmetric(r1 in 0usize..16, x1 in 0usize..20, y1 in 0usize..20,
                             r2 in 0usize..16, x2 in 0usize..20, y2 in 0usize..20,
                             g1 in 0.1f64..5.0, g2 in 0.1f64..5.0) {
            let cfg = FusionConfig::new(g1, g2).unwrap();
            let a = DiscretePose::new(r1, x1, y1);
            let b = DiscretePose::new(r2, x2, y2);
            prop_assert_eq!(cross_check(a, b, 16, &cfg), cross_check(b, a, 16, &cfg));
        }

        #[test]
        fn integer_moves_invert(r in 0usize..4, x in 5usize..15, y in 5usize..15,
                                dx in -4i32..=4, dy in -4i32..=4) {
            let p = DiscretePose::new(r, x, y);
            let fwd = Delta { dx: dx as f64, dy: dy as f64, dtheta: 0.0 };
            let back = Delta { dx: -dx as f64, dy: -dy as f64, dtheta: 0.0 };
            let q = dead_reckon(p, fwd, 4, 20, 20);
            prop_assert_eq!(dead_reckon(q, back, 4, 20, 20), p);
        }
    }
}
