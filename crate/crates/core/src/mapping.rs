//! Map registration and update.
//!
//! The rotated observation stack is stamped into world coordinates by the
//! pose belief, then fused into the map inside a square region around the
//! estimated pose, either by a convolutional LSTM cell or by leaky
//! integration.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{DiscretePose, PoseBelief};
use crate::rng::stream_rng;
use crate::tensor::{adjoint_project, correlate_in, softmax_cell_in_place, Grid3, KernelStack, Window};

/// Allocentric class-evidence map plus the recurrent cell memory that lives
/// alongside it.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMap {
    pub grid: Grid3,
    pub cell: Grid3,
}

impl SemanticMap {
    pub fn new(classes: usize, height: usize, width: usize) -> Self {
        Self {
            grid: Grid3::zeros(classes, height, width),
            cell: Grid3::zeros(classes, height, width),
        }
    }

    pub fn classes(&self) -> usize {
        self.grid.channels()
    }
}

/// Binary `H x W` region of interest.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiMask {
    height: usize,
    width: usize,
    window: Window,
}

impl RoiMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            window: Window { rows: 0..0, cols: 0..0 },
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            window: Window::full(height, width),
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.window.contains(x, y)
    }

    pub fn window(&self) -> &Window {
        &self.window
    }

    pub fn count(&self) -> usize {
        self.window.rows.len() * self.window.cols.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

/// `h x h` square centred on the pose, clipped to the map.
pub fn roi_mask(pose: DiscretePose, size: usize, height: usize, width: usize) -> Result<RoiMask> {
    if size % 2 == 0 {
        return Err(Error::Contract(format!("ROI size {size} must be odd")));
    }
    let half = size / 2;
    let rows = pose.x.saturating_sub(half)..(pose.x + half + 1).min(height);
    let cols = pose.y.saturating_sub(half)..(pose.y + half + 1).min(width);
    Ok(RoiMask {
        height,
        width,
        window: Window { rows, cols },
    })
}

/// Registers the egocentric stack into map coordinates: each rotation slice
/// is stamped at every pose, weighted by the belief, and summed over
/// rotations into an `L x H x W` grid.
pub fn project_observation(belief: &PoseBelief, stack: &KernelStack) -> Result<Grid3> {
    adjoint_project(belief.grid(), stack)
}

/// Leaky integration where the observation is positive:
/// `m' = (1 - alpha) m + alpha o`; other entries are untouched.
pub fn heuristic_update(map: &SemanticMap, obs: &Grid3, alpha: f64) -> Result<SemanticMap> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Contract(format!("alpha {alpha} outside [0, 1]")));
    }
    if !map.grid.same_shape(obs) {
        return Err(Error::shape(
            "heuristic_update",
            format!("{:?} vs {:?}", map.grid.shape(), obs.shape()),
        ));
    }
    let mut out = map.clone();
    for (m, &o) in out.grid.data_mut().iter_mut().zip(obs.data()) {
        if o > 0.0 {
            *m = (1.0 - alpha) * *m + alpha * o;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Gate {
    Input,
    Forget,
    Output,
    Candidate,
}

impl Gate {
    pub const ALL: [Gate; 4] = [Gate::Input, Gate::Forget, Gate::Output, Gate::Candidate];

    pub fn name(self) -> &'static str {
        match self {
            Gate::Input => "input",
            Gate::Forget => "forget",
            Gate::Output => "output",
            Gate::Candidate => "candidate",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Kernels over the registered observation and over the map (hidden state),
/// both `L -> L` with `k x k` support, plus a per-channel bias.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub input_kernel: KernelStack,
    pub hidden_kernel: KernelStack,
    pub bias: Vec<f64>,
}

impl GateParams {
    fn zeros(classes: usize, kernel: usize) -> Result<Self> {
        Ok(Self {
            input_kernel: KernelStack::zeros(classes, classes, kernel)?,
            hidden_kernel: KernelStack::zeros(classes, classes, kernel)?,
            bias: vec![0.0; classes],
        })
    }
}

/// Trainable state of the map-update cell.
///
/// `logit_scale` multiplies the cell output before the per-cell softmax and
/// is a fixed hyperparameter, not trained.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLstmParams {
    classes: usize,
    kernel: usize,
    logit_scale: f64,
    gates: [GateParams; 4],
}

pub const DEFAULT_KERNEL: usize = 3;
pub const DEFAULT_LOGIT_SCALE: f64 = 5.0;

impl ConvLstmParams {
    pub fn zeros(classes: usize, kernel: usize, logit_scale: f64) -> Result<Self> {
        if classes == 0 {
            return Err(Error::Config("ConvLSTM needs at least one class".into()));
        }
        if !(logit_scale > 0.0 && logit_scale.is_finite()) {
            return Err(Error::Config(format!("logit scale {logit_scale} must be positive")));
        }
        let g = GateParams::zeros(classes, kernel)?;
        Ok(Self {
            classes,
            kernel,
            logit_scale,
            gates: [g.clone(), g.clone(), g.clone(), g],
        })
    }

    /// Kernels uniform in `+-1/sqrt(fan_in)`; biases zero except the
    /// forget gate's, which start at +1.
    pub fn init(classes: usize, kernel: usize, logit_scale: f64, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(classes, kernel, logit_scale)?;
        let fan_in = (2 * classes * kernel * kernel) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let mut rng = stream_rng(seed, &[0xC0DE]);
        for g in p.gates.iter_mut() {
            for v in g.input_kernel.data_mut().iter_mut().chain(g.hidden_kernel.data_mut()) {
                *v = rng.random_range(-bound..bound);
            }
        }
        p.gates[Gate::Forget.index()].bias.iter_mut().for_each(|b| *b = 1.0);
        Ok(p)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn logit_scale(&self) -> f64 {
        self.logit_scale
    }

    pub fn gate(&self, g: Gate) -> &GateParams {
        &self.gates[g.index()]
    }

    pub fn gate_mut(&mut self, g: Gate) -> &mut GateParams {
        &mut self.gates[g.index()]
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.classes, self.kernel, self.logit_scale).expect("shape already validated")
    }

    pub fn block_names() -> Vec<String> {
        Gate::ALL
            .iter()
            .flat_map(|g| {
                ["input_kernel", "hidden_kernel", "bias"]
                    .iter()
                    .map(move |part| format!("{}.{}", g.name(), part))
            })
            .collect()
    }

    /// Parameter blocks in a fixed order: per gate, input kernel, hidden
    /// kernel, bias.
    pub fn blocks(&self) -> Vec<(String, &[f64])> {
        let names = Self::block_names();
        let mut out = Vec::with_capacity(12);
        for (k, g) in self.gates.iter().enumerate() {
            out.push((names[3 * k].clone(), g.input_kernel.data()));
            out.push((names[3 * k + 1].clone(), g.hidden_kernel.data()));
            out.push((names[3 * k + 2].clone(), g.bias.as_slice()));
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let names = Self::block_names();
        let mut out = Vec::with_capacity(12);
        for (k, g) in self.gates.iter_mut().enumerate() {
            out.push((names[3 * k].clone(), g.input_kernel.data_mut()));
            out.push((names[3 * k + 1].clone(), g.hidden_kernel.data_mut()));
            out.push((names[3 * k + 2].clone(), g.bias.as_mut_slice()));
        }
        out
    }

    pub fn len(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.blocks().into_iter().flat_map(|(_, b)| b.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::shape(
                "ConvLstmParams::set_flat",
                format!("{} values for {} parameters", flat.len(), self.len()),
            ));
        }
        let mut off = 0;
        for (_, block) in self.blocks_mut() {
            block.copy_from_slice(&flat[off..off + block.len()]);
            off += block.len();
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.blocks().iter().all(|(_, b)| b.iter().all(|v| v.is_finite()))
    }
}

#[inline]
pub(crate) fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Intermediate values of one cell step, kept for backpropagation. Gate
/// activations, memory and outputs are meaningful inside the mask only.
#[derive(Debug, Clone)]
pub(crate) struct StepCache {
    pub window: Window,
    pub prev_grid: Grid3,
    pub prev_cell: Grid3,
    pub obs: Grid3,
    /// Activated gates in `Gate::ALL` order.
    pub gates: [Grid3; 4],
    pub tanh_cell: Grid3,
    /// Per-cell softmax output written into the map.
    pub out: Grid3,
}

fn check_update_shapes(map: &SemanticMap, obs: &Grid3, mask: &RoiMask, params: &ConvLstmParams) -> Result<()> {
    let (l, h, w) = map.grid.shape();
    if obs.shape() != (l, h, w) || map.cell.shape() != (l, h, w) || mask.shape() != (h, w) || params.classes != l {
        return Err(Error::shape(
            "convlstm_update",
            format!(
                "map {:?}, cell {:?}, obs {:?}, mask {:?}, params L={}",
                map.grid.shape(),
                map.cell.shape(),
                obs.shape(),
                mask.shape(),
                params.classes
            ),
        ));
    }
    Ok(())
}

pub(crate) fn convlstm_forward(
    map: &SemanticMap,
    obs: &Grid3,
    mask: &RoiMask,
    params: &ConvLstmParams,
) -> Result<(SemanticMap, StepCache)> {
    check_update_shapes(map, obs, mask, params)?;
    let (lc, hh, ww) = map.grid.shape();
    let window = mask.window().clone();
    let mut pre: Vec<Grid3> = Vec::with_capacity(4);
    for g in Gate::ALL {
        let gp = params.gate(g);
        let mut z = correlate_in(obs, &gp.input_kernel, &window)?;
        let zh = correlate_in(&map.grid, &gp.hidden_kernel, &window)?;
        for l in 0..lc {
            for x in window.rows.clone() {
                for y in window.cols.clone() {
                    let i = z.index(l, x, y);
                    z.data_mut()[i] += zh.data()[i] + gp.bias[l];
                }
            }
        }
        pre.push(z);
    }
    let mut gates = [
        Grid3::zeros(lc, hh, ww),
        Grid3::zeros(lc, hh, ww),
        Grid3::zeros(lc, hh, ww),
        Grid3::zeros(lc, hh, ww),
    ];
    let mut tanh_cell = Grid3::zeros(lc, hh, ww);
    let mut out = Grid3::zeros(lc, hh, ww);
    let mut next = map.clone();
    let scale = params.logit_scale;
    for x in window.rows.clone() {
        for y in window.cols.clone() {
            for l in 0..lc {
                let i = pre[0].index(l, x, y);
                let ig = logistic(pre[0].data()[i]);
                let fg = logistic(pre[1].data()[i]);
                let og = logistic(pre[2].data()[i]);
                let cg = pre[3].data()[i].tanh();
                let c = fg * map.cell.data()[i] + ig * cg;
                let tc = c.tanh();
                gates[0].data_mut()[i] = ig;
                gates[1].data_mut()[i] = fg;
                gates[2].data_mut()[i] = og;
                gates[3].data_mut()[i] = cg;
                next.cell.data_mut()[i] = c;
                tanh_cell.data_mut()[i] = tc;
                out.data_mut()[i] = scale * og * tc;
            }
            softmax_cell_in_place(&mut out, x, y);
            for l in 0..lc {
                let i = out.index(l, x, y);
                next.grid.data_mut()[i] = out.data()[i];
            }
        }
    }
    let cache = StepCache {
        window,
        prev_grid: map.grid.clone(),
        prev_cell: map.cell.clone(),
        obs: obs.clone(),
        gates,
        tanh_cell,
        out,
    };
    Ok((next, cache))
}

/// One ConvLSTM step with the map as hidden state and the registered
/// observation as input:
///
/// ```text
/// i, f, o = logistic(conv)    g = tanh(conv)
/// c' = f * c + i * g          h' = o * tanh(c')
/// ```
///
/// Inside the mask the map becomes the per-cell softmax of `logit_scale * h'`
/// and the cell memory becomes `c'`; outside, both are left untouched.
pub fn convlstm_update(
    map: &SemanticMap,
    obs: &Grid3,
    mask: &RoiMask,
    params: &ConvLstmParams,
) -> Result<SemanticMap> {
    convlstm_forward(map, obs, mask, params).map(|(m, _)| m)
}

/// How the map absorbs a registered observation.
#[derive(Debug, Clone, PartialEq)]
pub enum MapUpdater {
    ConvLstm(ConvLstmParams),
    Heuristic { alpha: f64 },
    /// Leaves the map untouched.
    Frozen,
}

impl MapUpdater {
    pub fn update(&self, map: &SemanticMap, obs: &Grid3, mask: &RoiMask) -> Result<SemanticMap> {
        match self {
            MapUpdater::ConvLstm(p) => convlstm_update(map, obs, mask, p),
            MapUpdater::Heuristic { alpha } => heuristic_update(map, obs, *alpha),
            MapUpdater::Frozen => Ok(map.clone()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            MapUpdater::ConvLstm(_) => "convlstm".into(),
            MapUpdater::Heuristic { alpha } => format!("heuristic({alpha})"),
            MapUpdater::Frozen => "frozen".into(),
        }
    }
}
