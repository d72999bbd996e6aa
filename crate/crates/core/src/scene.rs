//! Synthetic indoor scenes and sensors.
//!
//! A scene is an `H x W` grid bounded by walls and sprinkled with
//! rectangular objects, each carrying a class label. The camera is a fan of
//! rays marched cell by cell; the first opaque cell a ray enters is what it
//! sees. The IMU reports egocentric displacement with Gaussian noise and a
//! constant bias.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, TAU};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{heading_angle, DiscretePose};
use crate::rng::stream_rng;
use crate::tensor::Grid3;

pub type Cell = (usize, usize);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class: usize,
    pub cells: Vec<Cell>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Occupant {
    Free,
    Wall,
    Object(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    height: usize,
    width: usize,
    classes: usize,
    objects: Vec<SceneObject>,
    walls: Vec<Cell>,
    occupancy: Vec<Occupant>,
}

impl Scene {
    /// Validates footprints (in bounds, at most one occupant per cell,
    /// classes in range) and indexes occupancy.
    pub fn new(
        height: usize,
        width: usize,
        classes: usize,
        objects: Vec<SceneObject>,
        walls: Vec<Cell>,
    ) -> Result<Self> {
        let mut occupancy = vec![Occupant::Free; height * width];
        let mut claim = |cell: Cell, who: Occupant| -> Result<()> {
            let (x, y) = cell;
            if x >= height || y >= width {
                return Err(Error::Contract(format!("cell {cell:?} outside {height}x{width}")));
            }
            let slot = &mut occupancy[x * width + y];
            if *slot != Occupant::Free {
                return Err(Error::Contract(format!("cell {cell:?} occupied twice")));
            }
            *slot = who;
            Ok(())
        };
        for &w in &walls {
            claim(w, Occupant::Wall)?;
        }
        for (k, obj) in objects.iter().enumerate() {
            if obj.class >= classes {
                return Err(Error::Contract(format!(
                    "object {k} has class {} but scene has {classes}",
                    obj.class
                )));
            }
            for &c in &obj.cells {
                claim(c, Occupant::Object(k))?;
            }
        }
        Ok(Self {
            height,
            width,
            classes,
            objects,
            walls,
            occupancy,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn objects(&self) -> &[SceneObject] {
        &self.objects
    }

    pub fn walls(&self) -> &[Cell] {
        &self.walls
    }

    pub fn occupant(&self, x: usize, y: usize) -> Occupant {
        self.occupancy[x * self.width + y]
    }

    pub fn is_free(&self, x: usize, y: usize) -> bool {
        x < self.height && y < self.width && self.occupant(x, y) == Occupant::Free
    }

    pub fn free_cells(&self) -> Vec<Cell> {
        (0..self.height)
            .flat_map(|x| (0..self.width).map(move |y| (x, y)))
            .filter(|&(x, y)| self.is_free(x, y))
            .collect()
    }

    /// Same scene with one extra object appended.
    pub fn with_object(&self, obj: SceneObject) -> Result<Self> {
        let mut objects = self.objects.clone();
        objects.push(obj);
        Self::new(self.height, self.width, self.classes, objects, self.walls.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneParams {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub object_count: usize,
    /// Inclusive range of rectangle side lengths, in cells.
    pub size_range: (usize, usize),
    pub max_attempts: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            height: 33,
            width: 33,
            classes: 5,
            object_count: 8,
            size_range: (1, 2),
            max_attempts: 5000,
        }
    }
}

/// Perimeter walls plus `object_count` axis-aligned rectangles, kept one
/// free cell apart from each other and from the walls so free space stays
/// connected.
pub fn generate_scene(seed: u64, params: &SceneParams) -> Result<Scene> {
    let SceneParams {
        height: hh,
        width: ww,
        classes,
        object_count,
        size_range: (smin, smax),
        max_attempts,
    } = *params;
    if hh < 5 || ww < 5 {
        return Err(Error::Config(format!("scene {hh}x{ww} is too small")));
    }
    if smin == 0 || smin > smax || classes == 0 {
        return Err(Error::Config(format!(
            "bad size range {:?} or class count {classes}",
            params.size_range
        )));
    }
    let free_area = (hh - 2) * (ww - 2);
    if object_count * smax * smax > free_area {
        return Err(Error::Contract(format!(
            "{object_count} objects of side {smax} cannot fit in {free_area} free cells"
        )));
    }
    let mut walls = Vec::new();
    for x in 0..hh {
        for y in 0..ww {
            if x == 0 || y == 0 || x == hh - 1 || y == ww - 1 {
                walls.push((x, y));
            }
        }
    }
    let mut rng = stream_rng(seed, &[0x5CE7E]);
    let mut taken = vec![false; hh * ww];
    let mut objects = Vec::with_capacity(object_count);
    for k in 0..object_count {
        let mut placed = false;
        for _ in 0..max_attempts {
            let a = rng.random_range(smin..=smax);
            let b = rng.random_range(smin..=smax);
            // keep a free ring next to the perimeter walls
            if a + 4 > hh || b + 4 > ww {
                continue;
            }
            let x0 = rng.random_range(2..=hh - 2 - a);
            let y0 = rng.random_range(2..=ww - 2 - b);
            let clash = (x0 - 1..x0 + a + 1)
                .any(|x| (y0 - 1..y0 + b + 1).any(|y| taken[x * ww + y]));
            if clash {
                continue;
            }
            let mut cells = Vec::with_capacity(a * b);
            for x in x0..x0 + a {
                for y in y0..y0 + b {
                    taken[x * ww + y] = true;
                    cells.push((x, y));
                }
            }
            objects.push(SceneObject {
                class: rng.random_range(0..classes),
                cells,
            });
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place object {k} after {max_attempts} attempts"
            )));
        }
    }
    Scene::new(hh, ww, classes, objects, walls)
}

/// Channel `l` is 1 on cells covered by a class-`l` object; walls and free
/// cells are 0 everywhere.
pub fn ground_truth_map(scene: &Scene) -> Grid3 {
    let mut g = Grid3::zeros(scene.classes, scene.height, scene.width);
    for obj in &scene.objects {
        for &(x, y) in &obj.cells {
            g.set(obj.class, x, y, 1.0);
        }
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraModel {
    /// Horizontal field of view in radians.
    pub fov: f64,
    /// Rays stop once their entry distance exceeds this many cells.
    pub max_range: f64,
    pub rays: usize,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self {
            fov: FRAC_PI_2,
            max_range: 5.0,
            rays: 720,
        }
    }
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.fov > 0.0 && self.fov <= TAU) {
            return Err(Error::Config(format!("fov {} outside (0, 2pi]", self.fov)));
        }
        if self.rays < 2 || !(self.max_range > 0.0) {
            return Err(Error::Config("camera needs >= 2 rays and positive range".into()));
        }
        Ok(())
    }
}

/// Visible mass of one object, keyed by egocentric cell (`+x` ahead, `+y`
/// to the left). Cells are sorted; masses are fractions of the rays that
/// would reach the object with every other object removed.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub class: usize,
    pub cells: Vec<((i64, i64), f64)>,
}

impl Detection {
    pub fn total_mass(&self) -> f64 {
        self.cells.iter().map(|(_, m)| m).sum()
    }
}

/// Per-object ray counts from one sweep.
#[derive(Default)]
struct ObjectHits {
    /// First-hit counts with occlusion, by world cell.
    visible: BTreeMap<Cell, u32>,
    /// First-hit counts ignoring other objects, by world cell.
    unoccluded: BTreeMap<Cell, u32>,
    unoccluded_total: u32,
}

/// Marches one ray through the grid (Amanatides-Woo traversal) and calls
/// `visit` with each entered cell until it returns `false`, the ray leaves
/// the grid, or its entry distance exceeds `max_range`.
fn march(
    scene: &Scene,
    origin: (f64, f64),
    angle: f64,
    max_range: f64,
    mut visit: impl FnMut(usize, usize) -> bool,
) {
    let (dx, dy) = (angle.cos(), angle.sin());
    let (mut cx, mut cy) = (origin.0.floor() as isize, origin.1.floor() as isize);
    let step_x: isize = if dx > 0.0 { 1 } else { -1 };
    let step_y: isize = if dy > 0.0 { 1 } else { -1 };
    let axis = |o: f64, c: isize, d: f64| -> (f64, f64) {
        if d.abs() < 1e-15 {
            (f64::INFINITY, f64::INFINITY)
        } else if d > 0.0 {
            ((c as f64 + 1.0 - o) / d, 1.0 / d)
        } else {
            ((c as f64 - o) / d, -1.0 / d)
        }
    };
    let (mut t_max_x, t_delta_x) = axis(origin.0, cx, dx);
    let (mut t_max_y, t_delta_y) = axis(origin.1, cy, dy);
    loop {
        let t;
        if t_max_x < t_max_y {
            t = t_max_x;
            cx += step_x;
            t_max_x += t_delta_x;
        } else {
            t = t_max_y;
            cy += step_y;
            t_max_y += t_delta_y;
        }
        if t > max_range {
            return;
        }
        if cx < 0 || cy < 0 || cx >= scene.height as isize || cy >= scene.width as isize {
            return;
        }
        if !visit(cx as usize, cy as usize) {
            return;
        }
    }
}

fn sweep(scene: &Scene, pose: DiscretePose, camera: &CameraModel, orientations: usize) -> Result<Vec<ObjectHits>> {
    camera.validate()?;
    if pose.x >= scene.height || pose.y >= scene.width || !scene.is_free(pose.x, pose.y) {
        return Err(Error::Contract(format!("pose {pose:?} is not on a free cell")));
    }
    let mut hits: Vec<ObjectHits> = (0..scene.objects.len()).map(|_| ObjectHits::default()).collect();
    let origin = (pose.x as f64 + 0.5, pose.y as f64 + 0.5);
    let heading = heading_angle(pose.r, orientations);
    let n = camera.rays;
    let mut seen = vec![false; scene.objects.len()];
    for k in 0..n {
        let angle = heading - camera.fov / 2.0 + camera.fov * (k as f64 + 0.5) / n as f64;
        seen.iter_mut().for_each(|s| *s = false);
        let mut occluded = false;
        march(scene, origin, angle, camera.max_range, |x, y| match scene.occupant(x, y) {
            Occupant::Free => true,
            Occupant::Wall => false,
            Occupant::Object(id) => {
                if !seen[id] {
                    seen[id] = true;
                    let h = &mut hits[id];
                    *h.unoccluded.entry((x, y)).or_insert(0) += 1;
                    h.unoccluded_total += 1;
                    if !occluded {
                        *h.visible.entry((x, y)).or_insert(0) += 1;
                    }
                }
                occluded = true;
                true
            }
        });
    }
    Ok(hits)
}

/// Egocentric footprint of a world offset for a camera at heading `theta`:
/// the rotated offset generally falls between cells, so its unit mass is
/// split bilinearly over the (up to four) surrounding egocentric cells.
pub fn splat_egocentric(dx: i64, dy: i64, theta: f64) -> Vec<((i64, i64), f64)> {
    let snap = |v: f64| if (v - v.round()).abs() < 1e-12 { v.round() } else { v };
    let (c, s) = (snap(theta.cos()), snap(theta.sin()));
    let (dx, dy) = (dx as f64, dy as f64);
    let a = snap(dx * c + dy * s);
    let b = snap(-dx * s + dy * c);
    let (a0, b0) = (a.floor(), b.floor());
    let (fa, fb) = (a - a0, b - b0);
    let mut out = Vec::with_capacity(4);
    for (ia, wa) in [(0, 1.0 - fa), (1, fa)] {
        for (ib, wb) in [(0, 1.0 - fb), (1, fb)] {
            let w = wa * wb;
            if w > 1e-12 {
                out.push(((a0 as i64 + ia, b0 as i64 + ib), w));
            }
        }
    }
    out
}

fn detections_from(
    scene: &Scene,
    pose: DiscretePose,
    orientations: usize,
    hits: Vec<ObjectHits>,
    occlusion: bool,
) -> Vec<Detection> {
    let theta = heading_angle(pose.r, orientations);
    let mut out = Vec::new();
    for (id, h) in hits.into_iter().enumerate() {
        if h.unoccluded_total == 0 {
            continue;
        }
        let counts = if occlusion { &h.visible } else { &h.unoccluded };
        if counts.is_empty() {
            continue;
        }
        let total = h.unoccluded_total as f64;
        let mut cells: BTreeMap<(i64, i64), f64> = BTreeMap::new();
        for (&(x, y), &n) in counts {
            let m = n as f64 / total;
            for (ego, w) in splat_egocentric(x as i64 - pose.x as i64, y as i64 - pose.y as i64, theta) {
                *cells.entry(ego).or_insert(0.0) += m * w;
            }
        }
        out.push(Detection {
            class: scene.objects[id].class,
            cells: cells.into_iter().collect(),
        });
    }
    out
}

/// Detections with occlusion: per object and world cell, the fraction of
/// the object's unobstructed rays that reach that cell first.
pub fn raycast_observe(
    scene: &Scene,
    pose: DiscretePose,
    camera: &CameraModel,
    orientations: usize,
) -> Result<Vec<Detection>> {
    let hits = sweep(scene, pose, camera, orientations)?;
    Ok(detections_from(scene, pose, orientations, hits, true))
}

/// Every object in the field of view as if nothing stood in front of it.
pub fn raycast_observe_unoccluded(
    scene: &Scene,
    pose: DiscretePose,
    camera: &CameraModel,
    orientations: usize,
) -> Result<Vec<Detection>> {
    let hits = sweep(scene, pose, camera, orientations)?;
    Ok(detections_from(scene, pose, orientations, hits, false))
}

/// Observation error sources. `occlusion` toggles obstruction; the other
/// three emulate detector and projection mistakes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorInjection {
    pub occlusion: bool,
    /// Probability a detection reports a wrong class.
    pub class_flip: f64,
    /// Each cell mass is scaled by `1 + U(-j, j)`.
    pub mass_jitter: f64,
    /// Probability a cell's mass is displaced to a 4-neighbour.
    pub shift_prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorTier {
    /// Detector errors, obstruction and rotation resampling.
    Real,
    /// Obstruction and rotation resampling.
    Obstructed,
    /// Rotation resampling only.
    Ideal,
}

impl ErrorTier {
    pub fn injection(self) -> ErrorInjection {
        match self {
            ErrorTier::Real => ErrorInjection {
                occlusion: true,
                class_flip: 0.1,
                mass_jitter: 0.3,
                shift_prob: 0.1,
            },
            ErrorTier::Obstructed => ErrorInjection {
                occlusion: true,
                class_flip: 0.0,
                mass_jitter: 0.0,
                shift_prob: 0.0,
            },
            ErrorTier::Ideal => ErrorInjection {
                occlusion: false,
                class_flip: 0.0,
                mass_jitter: 0.0,
                shift_prob: 0.0,
            },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorTier::Real => "real",
            ErrorTier::Obstructed => "obstructed",
            ErrorTier::Ideal => "ideal",
        }
    }
}

impl std::str::FromStr for ErrorTier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(ErrorTier::Real),
            "obstructed" => Ok(ErrorTier::Obstructed),
            "ideal" => Ok(ErrorTier::Ideal),
            other => Err(Error::Config(format!("unknown error tier '{other}'"))),
        }
    }
}

/// Ray-cast detections with the configured error sources applied.
pub fn sense(
    scene: &Scene,
    pose: DiscretePose,
    camera: &CameraModel,
    orientations: usize,
    injection: &ErrorInjection,
    rng: &mut impl Rng,
) -> Result<Vec<Detection>> {
    let hits = sweep(scene, pose, camera, orientations)?;
    let mut dets = detections_from(scene, pose, orientations, hits, injection.occlusion);
    for d in &mut dets {
        if injection.class_flip > 0.0 && scene.classes > 1 && rng.random::<f64>() < injection.class_flip {
            let shift = rng.random_range(1..scene.classes);
            d.class = (d.class + shift) % scene.classes;
        }
        if injection.mass_jitter > 0.0 || injection.shift_prob > 0.0 {
            let mut cells: BTreeMap<(i64, i64), f64> = BTreeMap::new();
            for &((a, b), m) in &d.cells {
                let mut m = m;
                if injection.mass_jitter > 0.0 {
                    m *= 1.0 + rng.random_range(-injection.mass_jitter..=injection.mass_jitter);
                }
                let mut cell = (a, b);
                if injection.shift_prob > 0.0 && rng.random::<f64>() < injection.shift_prob {
                    cell = match rng.random_range(0..4) {
                        0 => (a + 1, b),
                        1 => (a - 1, b),
                        2 => (a, b + 1),
                        _ => (a, b - 1),
                    };
                }
                *cells.entry(cell).or_insert(0.0) += m.max(0.0);
            }
            d.cells = cells.into_iter().collect();
        }
    }
    Ok(dets)
}

/// Egocentric displacement since the previous step: `dx` ahead, `dy` to
/// the left (cells), `dtheta` counter-clockwise (radians).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Delta {
    pub dx: f64,
    pub dy: f64,
    pub dtheta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImuModel {
    /// Per-component position noise std, cells.
    pub sigma_pos: f64,
    /// Heading noise std, radians.
    pub sigma_theta: f64,
    /// Constant per-step position bias added to both components, cells.
    pub bias_pos: f64,
    /// Constant per-step heading bias, radians.
    pub bias_theta: f64,
    pub seed: u64,
}

impl Default for ImuModel {
    fn default() -> Self {
        Self {
            sigma_pos: 0.4,
            sigma_theta: 0.1,
            bias_pos: 0.25,
            bias_theta: 0.05,
            seed: 0,
        }
    }
}

impl ImuModel {
    pub fn noiseless() -> Self {
        Self {
            sigma_pos: 0.0,
            sigma_theta: 0.0,
            bias_pos: 0.0,
            bias_theta: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_pos >= 0.0 && self.sigma_theta >= 0.0) {
            return Err(Error::Config("IMU sigmas must be non-negative".into()));
        }
        Ok(())
    }
}

/// One IMU reading: `true + bias + N(0, sigma)` per component. The noise
/// stream depends only on `(model.seed, step)`.
pub fn imu_read(truth: Delta, model: &ImuModel, step: usize) -> Delta {
    let mut rng = stream_rng(model.seed, &[0x1A0, step as u64]);
    let mut noise = |sigma: f64| -> f64 {
        if sigma > 0.0 {
            Normal::new(0.0, sigma).expect("sigma is positive").sample(&mut rng)
        } else {
            0.0
        }
    };
    let nx = noise(model.sigma_pos);
    let ny = noise(model.sigma_pos);
    let nt = noise(model.sigma_theta);
    Delta {
        dx: truth.dx + model.bias_pos + nx,
        dy: truth.dy + model.bias_pos + ny,
        dtheta: truth.dtheta + model.bias_theta + nt,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub poses: Vec<DiscretePose>,
    /// `true_deltas[t]` moves `poses[t]` to `poses[t + 1]`.
    pub true_deltas: Vec<Delta>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

/// Requires candidate poses to see at least `min_visible` objects with
/// visible mass of at least `min_mass` each.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewConstraint {
    pub camera: CameraModel,
    pub min_visible: usize,
    pub min_mass: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionParams {
    pub orientations: usize,
    /// Largest per-axis displacement per step, cells.
    pub max_step: usize,
    /// Largest heading change per step, levels.
    pub max_turn: usize,
    pub view: Option<ViewConstraint>,
    pub max_attempts: usize,
}

impl Default for MotionParams {
    fn default() -> Self {
        Self {
            orientations: 8,
            max_step: 2,
            max_turn: 1,
            view: None,
            max_attempts: 200,
        }
    }
}

/// Egocentric delta that takes `from` to `to`.
pub fn egocentric_delta(from: DiscretePose, to: DiscretePose, orientations: usize) -> Delta {
    let theta = heading_angle(from.r, orientations);
    let wx = to.x as f64 - from.x as f64;
    let wy = to.y as f64 - from.y as f64;
    let mut dr = to.r as i64 - from.r as i64;
    let half = orientations as i64 / 2;
    if dr > half {
        dr -= orientations as i64;
    } else if dr < -half {
        dr += orientations as i64;
    }
    Delta {
        dx: wx * theta.cos() + wy * theta.sin(),
        dy: -wx * theta.sin() + wy * theta.cos(),
        dtheta: TAU * dr as f64 / orientations as f64,
    }
}

fn visible_objects(scene: &Scene, pose: DiscretePose, orientations: usize, view: &ViewConstraint) -> Result<usize> {
    let dets = raycast_observe(scene, pose, &view.camera, orientations)?;
    Ok(dets.iter().filter(|d| d.total_mass() >= view.min_mass).count())
}

/// Random walk over free cells. Each step turns by at most `max_turn`
/// levels and moves by at most `max_step` cells per axis. With a view
/// constraint, the first candidate meeting it is taken, otherwise the
/// candidate seeing the most objects.
pub fn generate_trajectory(
    scene: &Scene,
    seed: u64,
    steps: usize,
    motion: &MotionParams,
) -> Result<Trajectory> {
    if steps == 0 {
        return Err(Error::Config("trajectory needs at least one step".into()));
    }
    let r_count = motion.orientations;
    if r_count == 0 {
        return Err(Error::Config("orientations must be positive".into()));
    }
    let free = scene.free_cells();
    if free.is_empty() {
        return Err(Error::Generation("scene has no free cell".into()));
    }
    let mut rng = stream_rng(seed, &[0x7A1]);
    let attempts = motion.max_attempts.max(1);

    let pick = |cands: &mut dyn FnMut() -> Option<DiscretePose>| -> Result<Option<DiscretePose>> {
        let mut best: Option<(usize, DiscretePose)> = None;
        for _ in 0..attempts {
            let Some(p) = cands() else { continue };
            let Some(view) = &motion.view else { return Ok(Some(p)) };
            let seen = visible_objects(scene, p, r_count, view)?;
            if seen >= view.min_visible {
                return Ok(Some(p));
            }
            if best.map_or(true, |(b, _)| seen > b) {
                best = Some((seen, p));
            }
        }
        Ok(best.map(|(_, p)| p))
    };

    let start = pick(&mut || {
        let (x, y) = free[rng.random_range(0..free.len())];
        Some(DiscretePose::new(rng.random_range(0..r_count), x, y))
    })?
    .expect("start candidates always exist");

    let mut poses = vec![start];
    let mut deltas = Vec::with_capacity(steps - 1);
    let (ms, mt) = (motion.max_step as i64, motion.max_turn as i64);
    for t in 1..steps {
        let prev = poses[t - 1];
        let next = pick(&mut || {
            let dr = rng.random_range(-mt..=mt);
            let dx = rng.random_range(-ms..=ms);
            let dy = rng.random_range(-ms..=ms);
            if dr == 0 && dx == 0 && dy == 0 {
                return None;
            }
            let x = prev.x as i64 + dx;
            let y = prev.y as i64 + dy;
            if x < 0 || y < 0 || !scene.is_free(x as usize, y as usize) {
                return None;
            }
            let r = (prev.r as i64 + dr).rem_euclid(r_count as i64) as usize;
            Some(DiscretePose::new(r, x as usize, y as usize))
        })?
        .ok_or_else(|| Error::Generation(format!("walker trapped at step {t} from {prev:?}")))?;
        deltas.push(egocentric_delta(prev, next, r_count));
        poses.push(next);
    }
    Ok(Trajectory {
        poses,
        true_deltas: deltas,
    })
}
