//! Egocentric semantic observation maps built from per-object detections.

use crate::error::{Error, Result};
use crate::scene::Detection;
use crate::tensor::Grid3;

/// Default noise floor below which observation entries are dropped.
pub const DEFAULT_BETA: f64 = 0.02;

/// `L x h x h` top-down view centred on the camera, heading along +x.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationMap {
    pub grid: Grid3,
    pub step: usize,
}

impl ObservationMap {
    pub fn size(&self) -> usize {
        self.grid.height()
    }

    pub fn classes(&self) -> usize {
        self.grid.channels()
    }
}

/// Accumulates detection mass into an `L x h x h` grid. Egocentric cell
/// `(a, b)` lands at `(h/2 + a, h/2 + b)`; cells outside the window are
/// dropped.
pub fn project_features(
    detections: &[Detection],
    classes: usize,
    size: usize,
    step: usize,
) -> Result<ObservationMap> {
    if size % 2 == 0 {
        return Err(Error::Contract(format!("observation size {size} must be odd")));
    }
    let half = (size / 2) as i64;
    let mut grid = Grid3::zeros(classes, size, size);
    for det in detections {
        if det.class >= classes {
            return Err(Error::Contract(format!(
                "detection class {} out of range for {} classes",
                det.class, classes
            )));
        }
        for &((a, b), mass) in &det.cells {
            let (x, y) = (a + half, b + half);
            if x < 0 || y < 0 || x >= size as i64 || y >= size as i64 {
                continue;
            }
            grid.add_at(det.class, x as usize, y as usize, mass);
        }
    }
    Ok(ObservationMap { grid, step })
}

/// Zeroes entries strictly below `beta`.
pub fn filter_noise(obs: &ObservationMap, beta: f64) -> ObservationMap {
    ObservationMap {
        grid: obs.grid.map(|v| if v < beta { 0.0 } else { v }),
        step: obs.step,
    }
}
