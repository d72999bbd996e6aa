//! Visual pose estimation: the observation is rotated into each of `R`
//! allocentric heading hypotheses, correlated against the map, and the
//! scores are turned into a probability field over `(r, x, y)`.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::observation::ObservationMap;
use crate::tensor::{correlate, rotate_bilinear, softmax_all, Grid3, KernelStack};

/// Orientation level and grid cell. Heading level `r` points along angle
/// `2*pi*r/R`, measured counter-clockwise from the +x (row) axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DiscretePose {
    pub r: usize,
    pub x: usize,
    pub y: usize,
}

impl DiscretePose {
    pub const fn new(r: usize, x: usize, y: usize) -> Self {
        Self { r, x, y }
    }

    pub fn heading(&self, orientations: usize) -> f64 {
        heading_angle(self.r, orientations)
    }
}

pub fn heading_angle(level: usize, orientations: usize) -> f64 {
    TAU * level as f64 / orientations as f64
}

/// Probability field over `R x H x W` discrete poses.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseBelief {
    grid: Grid3,
}

impl PoseBelief {
    /// Wraps a grid that must already be a distribution.
    pub fn from_grid(grid: Grid3) -> Result<Self> {
        if grid.data().iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Contract("pose belief has negative or non-finite entries".into()));
        }
        let s = grid.sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!("pose belief sums to {s}")));
        }
        Ok(Self { grid })
    }

    pub fn one_hot(orientations: usize, height: usize, width: usize, pose: DiscretePose) -> Self {
        let mut grid = Grid3::zeros(orientations, height, width);
        grid.set(pose.r, pose.x, pose.y, 1.0);
        Self { grid }
    }

    pub fn uniform(orientations: usize, height: usize, width: usize) -> Self {
        let n = (orientations * height * width) as f64;
        Self {
            grid: Grid3::filled(orientations, height, width, 1.0 / n),
        }
    }

    pub fn grid(&self) -> &Grid3 {
        &self.grid
    }

    pub fn into_grid(self) -> Grid3 {
        self.grid
    }

    pub fn orientations(&self) -> usize {
        self.grid.channels()
    }

    pub fn total(&self) -> f64 {
        self.grid.sum()
    }

    pub fn prob(&self, pose: DiscretePose) -> f64 {
        self.grid.get(pose.r, pose.x, pose.y)
    }
}

/// Resamples the observation at every heading `2*pi*r/R`; slice 0 is an
/// exact copy.
pub fn rotation_stack(obs: &ObservationMap, orientations: usize) -> Result<KernelStack> {
    if orientations == 0 {
        return Err(Error::Contract("rotation stack needs at least one orientation".into()));
    }
    let slices = (0..orientations)
        .map(|r| rotate_bilinear(&obs.grid, heading_angle(r, orientations)))
        .collect::<Result<Vec<_>>>()?;
    KernelStack::from_slices(&slices)
}

/// `softmax(correlate(map, stack))` over all `R * H * W` entries.
pub fn visual_belief(map: &Grid3, stack: &KernelStack) -> Result<PoseBelief> {
    let scores = correlate(map, stack)?;
    Ok(PoseBelief {
        grid: softmax_all(&scores),
    })
}

/// Index of the largest entry; ties go to the smallest `(r, x, y)`.
pub fn argmax_pose(belief: &PoseBelief) -> DiscretePose {
    let g = belief.grid();
    let mut best = DiscretePose::new(0, 0, 0);
    let mut best_v = f64::NEG_INFINITY;
    for r in 0..g.channels() {
        for x in 0..g.height() {
            for y in 0..g.width() {
                let v = g.get(r, x, y);
                if v > best_v {
                    best_v = v;
                    best = DiscretePose::new(r, x, y);
                }
            }
        }
    }
    best
}
