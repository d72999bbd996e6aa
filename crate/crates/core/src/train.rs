//! Training of the map-update cell: KL reconstruction loss, backpropagation
//! through time over whole episodes, and a finite-difference gradient check.
//!
//! Pose beliefs are held fixed during differentiation. Once an episode has
//! been rolled out, its registered observations and ROI masks are constants
//! and the loss is a function of the cell parameters alone.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mapping::{convlstm_forward, ConvLstmParams, Gate, MapUpdater, SemanticMap, StepCache};
use crate::metrics::{smoothed_distribution, DEFAULT_SMOOTHING};
use crate::pipeline::{run_episode, Episode, EpisodeInputs, LocalizationMode, PipelineConfig};
use crate::rng::stream_rng;
use crate::tensor::{adjoint_project, kernel_gradient, Grid3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    /// Episodes per parameter update.
    pub batch: usize,
    pub smoothing: f64,
    pub seed: u64,
    /// Register observations at the true pose instead of the estimate.
    pub teacher_forcing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 1e-3,
            optimizer: Optimizer::default(),
            batch: 4,
            smoothing: DEFAULT_SMOOTHING,
            seed: 0,
            teacher_forcing: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be >= 0", self.learning_rate)));
        }
        if !(self.smoothing > 0.0) {
            return Err(Error::Config("KL smoothing must be positive".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must hold at least one episode".into()));
        }
        Ok(())
    }
}

fn check_maps(truth: &Grid3, est: &Grid3) -> Result<()> {
    if !truth.same_shape(est) {
        return Err(Error::shape("kl_loss", format!("{:?} vs {:?}", truth.shape(), est.shape())));
    }
    Ok(())
}

/// Sum over cells of `KL(truth || est)`, each cell's class vector smoothed
/// by `eps` and renormalized first.
pub fn kl_loss(truth: &Grid3, est: &Grid3, eps: f64) -> Result<f64> {
    check_maps(truth, est)?;
    let (lc, hh, ww) = truth.shape();
    let mut tv = vec![0.0; lc];
    let mut ev = vec![0.0; lc];
    let mut p = vec![0.0; lc];
    let mut q = vec![0.0; lc];
    let mut acc = 0.0;
    for x in 0..hh {
        for y in 0..ww {
            for l in 0..lc {
                tv[l] = truth.get(l, x, y);
                ev[l] = est.get(l, x, y);
            }
            smoothed_distribution(&tv, eps, &mut p);
            smoothed_distribution(&ev, eps, &mut q);
            acc += p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum::<f64>();
        }
    }
    Ok(acc)
}

/// Gradient of [`kl_loss`] with respect to `est`, times `scale`, added into
/// `out`: `d/de_l = -t_l / (e_l + eps) + 1 / sum(e + eps)` with `t` the
/// smoothed truth.
fn kl_grad_into(truth: &Grid3, est: &Grid3, eps: f64, scale: f64, out: &mut Grid3) {
    let (lc, hh, ww) = truth.shape();
    let mut tv = vec![0.0; lc];
    let mut p = vec![0.0; lc];
    for x in 0..hh {
        for y in 0..ww {
            let mut z = 0.0;
            for l in 0..lc {
                tv[l] = truth.get(l, x, y);
                z += est.get(l, x, y) + eps;
            }
            smoothed_distribution(&tv, eps, &mut p);
            for l in 0..lc {
                let g = -p[l] / (est.get(l, x, y) + eps) + 1.0 / z;
                out.add_at(l, x, y, scale * g);
            }
        }
    }
}

fn check_inputs(inputs: &EpisodeInputs, params: &ConvLstmParams) -> Result<()> {
    if inputs.steps() == 0 || inputs.masks.len() != inputs.steps() {
        return Err(Error::Contract(format!(
            "episode has {} observations and {} masks",
            inputs.steps(),
            inputs.masks.len()
        )));
    }
    if inputs.truth.channels() != params.classes() {
        return Err(Error::shape(
            "unroll",
            format!("{} map classes, {} parameter classes", inputs.truth.channels(), params.classes()),
        ));
    }
    Ok(())
}

fn fresh_map(inputs: &EpisodeInputs) -> SemanticMap {
    let (l, h, w) = inputs.truth.shape();
    SemanticMap::new(l, h, w)
}

/// Episode loss: mean over steps of the KL between the target and the map
/// after that step's update, starting from an empty map.
pub fn unroll_loss(params: &ConvLstmParams, inputs: &EpisodeInputs, eps: f64) -> Result<f64> {
    check_inputs(inputs, params)?;
    let mut map = fresh_map(inputs);
    let mut loss = 0.0;
    for (t, (obs, mask)) in inputs.observations.iter().zip(&inputs.masks).enumerate() {
        map = convlstm_forward(&map, obs, mask, params)?.0;
        let l = kl_loss(&inputs.truth, &map.grid, eps)?;
        if !l.is_finite() {
            return Err(Error::NonFinite {
                step: t,
                detail: "loss".into(),
            });
        }
        loss += l;
    }
    Ok(loss / inputs.steps() as f64)
}

/// Backward pass through one cell step. `dm` and `dc` hold the gradient with
/// respect to the map and cell memory leaving the step; on return they hold
/// the gradient with respect to the values entering it.
fn step_backward(
    cache: &StepCache,
    params: &ConvLstmParams,
    dm: &mut Grid3,
    dc: &mut Grid3,
    grads: &mut ConvLstmParams,
) -> Result<()> {
    let (lc, hh, ww) = dm.shape();
    let win = &cache.window;
    if win.is_empty() {
        return Ok(());
    }
    let scale = params.logit_scale();
    let mut dz: [Grid3; 4] = std::array::from_fn(|_| Grid3::zeros(lc, hh, ww));
    let mut dlogit = vec![0.0; lc];
    for x in win.rows.clone() {
        for y in win.cols.clone() {
            let mut dot = 0.0;
            for l in 0..lc {
                dot += cache.out.get(l, x, y) * dm.get(l, x, y);
            }
            for (l, d) in dlogit.iter_mut().enumerate() {
                *d = cache.out.get(l, x, y) * (dm.get(l, x, y) - dot);
            }
            for l in 0..lc {
                let i = dm.index(l, x, y);
                let ig = cache.gates[0].data()[i];
                let fg = cache.gates[1].data()[i];
                let og = cache.gates[2].data()[i];
                let cg = cache.gates[3].data()[i];
                let tc = cache.tanh_cell.data()[i];
                let dh = scale * dlogit[l];
                let dct = dc.data()[i] + dh * og * (1.0 - tc * tc);
                let d_o = dh * tc;
                let d_i = dct * cg;
                let d_g = dct * ig;
                let d_f = dct * cache.prev_cell.data()[i];
                dz[0].data_mut()[i] = d_i * ig * (1.0 - ig);
                dz[1].data_mut()[i] = d_f * fg * (1.0 - fg);
                dz[2].data_mut()[i] = d_o * og * (1.0 - og);
                dz[3].data_mut()[i] = d_g * (1.0 - cg * cg);
                dc.data_mut()[i] = dct * fg;
                // the old map value at an ROI cell is overwritten
                dm.data_mut()[i] = 0.0;
            }
        }
    }
    let k = params.kernel();
    for (gi, g) in Gate::ALL.into_iter().enumerate() {
        let dzg = &dz[gi];
        let dwi = kernel_gradient(dzg, &cache.obs, k, win)?;
        let dwh = kernel_gradient(dzg, &cache.prev_grid, k, win)?;
        let back = adjoint_project(dzg, &params.gate(g).hidden_kernel)?;
        let gp = grads.gate_mut(g);
        for (a, b) in gp.input_kernel.data_mut().iter_mut().zip(dwi.data()) {
            *a += b;
        }
        for (a, b) in gp.hidden_kernel.data_mut().iter_mut().zip(dwh.data()) {
            *a += b;
        }
        for l in 0..lc {
            let mut s = 0.0;
            for x in win.rows.clone() {
                for y in win.cols.clone() {
                    s += dzg.get(l, x, y);
                }
            }
            gp.bias[l] += s;
        }
        for (a, b) in dm.data_mut().iter_mut().zip(back.data()) {
            *a += b;
        }
    }
    Ok(())
}

/// Loss of [`unroll_loss`] and its exact gradient with respect to every
/// parameter, by backpropagation through all steps.
pub fn unroll_backprop(
    params: &ConvLstmParams,
    inputs: &EpisodeInputs,
    eps: f64,
) -> Result<(f64, ConvLstmParams)> {
    check_inputs(inputs, params)?;
    let steps = inputs.steps();
    let mut map = fresh_map(inputs);
    let mut caches = Vec::with_capacity(steps);
    let mut maps = Vec::with_capacity(steps);
    let mut loss = 0.0;
    for (t, (obs, mask)) in inputs.observations.iter().zip(&inputs.masks).enumerate() {
        let (next, cache) = convlstm_forward(&map, obs, mask, params)?;
        let l = kl_loss(&inputs.truth, &next.grid, eps)?;
        if !l.is_finite() {
            return Err(Error::NonFinite {
                step: t,
                detail: "loss".into(),
            });
        }
        loss += l;
        caches.push(cache);
        maps.push(next.grid.clone());
        map = next;
    }
    let scale = 1.0 / steps as f64;
    let (lc, hh, ww) = inputs.truth.shape();
    let mut dm = Grid3::zeros(lc, hh, ww);
    let mut dc = Grid3::zeros(lc, hh, ww);
    let mut grads = params.zeros_like();
    for t in (0..steps).rev() {
        kl_grad_into(&inputs.truth, &maps[t], eps, scale, &mut dm);
        step_backward(&caches[t], params, &mut dm, &mut dc, &mut grads)?;
        if !dm.all_finite() || !dc.all_finite() {
            return Err(Error::NonFinite {
                step: t,
                detail: "gradient".into(),
            });
        }
    }
    if !grads.all_finite() {
        return Err(Error::NonFinite {
            step: 0,
            detail: "parameter gradient".into(),
        });
    }
    Ok((loss * scale, grads))
}

/// Rolls the episode out with the current parameters (poses estimated per
/// `pipeline.mode`, or true poses under teacher forcing) and returns the
/// loss and gradient of the resulting map sequence.
pub fn rollout_and_backprop(
    episode: &Episode,
    params: &ConvLstmParams,
    pipeline: &PipelineConfig,
    cfg: &TrainConfig,
) -> Result<(f64, ConvLstmParams)> {
    let inputs = rollout_inputs(episode, params, pipeline, cfg.teacher_forcing)?;
    unroll_backprop(params, &inputs, cfg.smoothing)
}

pub fn rollout_inputs(
    episode: &Episode,
    params: &ConvLstmParams,
    pipeline: &PipelineConfig,
    teacher_forcing: bool,
) -> Result<EpisodeInputs> {
    let mut pc = pipeline.clone();
    if teacher_forcing {
        pc.mode = LocalizationMode::GroundTruth;
    }
    Ok(run_episode(episode, &MapUpdater::ConvLstm(params.clone()), &pc)?.inputs)
}

/// Total loss and summed flat gradient, added up in slice order.
pub fn accumulate(results: &[(f64, ConvLstmParams)]) -> (f64, Vec<f64>) {
    let n = results.first().map_or(0, |(_, g)| g.len());
    let mut sum = vec![0.0; n];
    let mut loss = 0.0;
    for (l, g) in results {
        loss += l;
        for (s, v) in sum.iter_mut().zip(g.to_flat()) {
            *s += v;
        }
    }
    (loss, sum)
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

fn apply_update(
    params: &mut ConvLstmParams,
    grad: &[f64],
    cfg: &TrainConfig,
    adam: &mut AdamState,
) -> Result<()> {
    let mut flat = params.to_flat();
    let lr = cfg.learning_rate;
    match cfg.optimizer {
        Optimizer::Sgd => {
            for (p, g) in flat.iter_mut().zip(grad) {
                *p -= lr * g;
            }
        }
        Optimizer::Adam { beta1, beta2, eps } => {
            adam.t += 1;
            let c1 = 1.0 - beta1.powi(adam.t);
            let c2 = 1.0 - beta2.powi(adam.t);
            for i in 0..flat.len() {
                adam.m[i] = beta1 * adam.m[i] + (1.0 - beta1) * grad[i];
                adam.v[i] = beta2 * adam.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                let mh = adam.m[i] / c1;
                let vh = adam.v[i] / c2;
                flat[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
    params.set_flat(&flat)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ConvLstmParams,
    /// Mean training loss per epoch, measured while the epoch ran.
    pub losses: Vec<f64>,
}

/// Mini-batch training over shuffled episodes. Episodes of a batch are
/// rolled out in parallel and their gradients summed in episode order, so
/// results do not depend on the thread count. `on_epoch` sees the
/// parameters after every epoch.
pub fn train(
    episodes: &[Episode],
    init: &ConvLstmParams,
    pipeline: &PipelineConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport, &ConvLstmParams) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if episodes.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut params = init.clone();
    let n = params.len();
    let mut adam = AdamState {
        m: vec![0.0; n],
        v: vec![0.0; n],
        t: 0,
    };
    // under teacher forcing the rollout does not depend on the parameters
    let fixed: Option<Vec<EpisodeInputs>> = if cfg.teacher_forcing {
        Some(
            episodes
                .par_iter()
                .map(|e| rollout_inputs(e, &params, pipeline, true))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut initial: Option<f64> = None;
    let mut order: Vec<usize> = (0..episodes.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut stream_rng(cfg.seed, &[0x5EED, epoch as u64]));
        let mut per_episode = vec![0.0; episodes.len()];
        for batch in order.chunks(cfg.batch) {
            let results = batch
                .par_iter()
                .map(|&i| match &fixed {
                    Some(inputs) => unroll_backprop(&params, &inputs[i], cfg.smoothing),
                    None => rollout_and_backprop(&episodes[i], &params, pipeline, cfg),
                })
                .collect::<Result<Vec<_>>>()?;
            for (&i, (loss, _)) in batch.iter().zip(&results) {
                per_episode[i] = *loss;
            }
            let (_, mut sum) = accumulate(&results);
            let inv = 1.0 / batch.len() as f64;
            sum.iter_mut().for_each(|v| *v *= inv);
            apply_update(&mut params, &sum, cfg, &mut adam)?;
            if !params.all_finite() {
                return Err(Error::NonFinite {
                    step: 0,
                    detail: format!("parameters after update in epoch {epoch}"),
                });
            }
        }
        let loss = per_episode.iter().sum::<f64>() / episodes.len() as f64;
        let base = *initial.get_or_insert(loss);
        let limit = 1e3 * base;
        if !loss.is_finite() || loss > limit {
            return Err(Error::Divergence { epoch, loss, limit });
        }
        log::info!("epoch {epoch}: loss {loss:.6}");
        losses.push(loss);
        on_epoch(&EpochReport { epoch, loss }, &params)?;
    }
    Ok(TrainOutcome { params, losses })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub fd_step: f64,
    pub blocks: Vec<BlockReport>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err() < tol
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Coordinates checked per block; smaller blocks are checked in full.
pub const GRAD_CHECK_COORDS: usize = 128;

/// Compares analytic gradients with central differences
/// `(f(p + d) - f(p - d)) / 2d`. Blocks up to [`GRAD_CHECK_COORDS`] long
/// are checked in full, so zero-valued biases are always covered; larger
/// blocks use a seeded random subset.
pub fn grad_check(
    params: &ConvLstmParams,
    inputs: &EpisodeInputs,
    fd_step: f64,
    eps: f64,
    seed: u64,
) -> Result<GradReport> {
    if !(1e-7..=1e-3).contains(&fd_step) {
        return Err(Error::Config(format!("fd step {fd_step} outside [1e-7, 1e-3]")));
    }
    let names = ConvLstmParams::block_names();
    let mut worst = vec![0.0f64; names.len()];
    let mut counts = vec![0usize; names.len()];
    let (_, grads) = unroll_backprop(params, inputs, eps)?;
    let analytic = grads.to_flat();
    let mut rng = stream_rng(seed, &[0x6C]);
    let mut jobs = Vec::new();
    let mut offset = 0;
    for (bi, (_, block)) in params.blocks().iter().enumerate() {
        let len = block.len();
        let mut idx: Vec<usize> = (0..len).collect();
        if len > GRAD_CHECK_COORDS {
            idx.shuffle(&mut rng);
            idx.truncate(GRAD_CHECK_COORDS);
            idx.sort_unstable();
        }
        jobs.extend(idx.into_iter().map(|i| (bi, offset + i)));
        offset += len;
    }
    let base = params.to_flat();
    let errs = jobs
        .par_iter()
        .map(|&(bi, i)| {
            let mut q = params.clone();
            let mut flat = base.clone();
            flat[i] = base[i] + fd_step;
            q.set_flat(&flat)?;
            let fp = unroll_loss(&q, inputs, eps)?;
            flat[i] = base[i] - fd_step;
            q.set_flat(&flat)?;
            let fm = unroll_loss(&q, inputs, eps)?;
            let fd = (fp - fm) / (2.0 * fd_step);
            Ok((bi, relative_error(analytic[i], fd)))
        })
        .collect::<Result<Vec<_>>>()?;
    for (bi, e) in errs {
        worst[bi] = worst[bi].max(e);
        counts[bi] += 1;
    }
    Ok(GradReport {
        fd_step,
        blocks: names
            .into_iter()
            .zip(worst.into_iter().zip(counts))
            .map(|(name, (max_rel_err, coords))| BlockReport {
                name,
                coords,
                max_rel_err,
            })
            .collect(),
    })
}

/// Small random episode for gradient checking: sparse non-negative
/// registered observations, random ROI windows, and a target with a
/// labelled cell here and there.
pub fn synthetic_inputs(classes: usize, size: usize, roi: usize, steps: usize, seed: u64) -> Result<EpisodeInputs> {
    use crate::mapping::roi_mask;
    use crate::pose::DiscretePose;
    let mut rng = stream_rng(seed, &[0x5A]);
    let mut truth = Grid3::zeros(classes, size, size);
    for x in 0..size {
        for y in 0..size {
            if rng.random::<f64>() < 0.3 {
                truth.set(rng.random_range(0..classes), x, y, 1.0);
            }
        }
    }
    let mut observations = Vec::with_capacity(steps);
    let mut masks = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut o = Grid3::zeros(classes, size, size);
        for v in o.data_mut() {
            if rng.random::<f64>() < 0.3 {
                *v = rng.random_range(0.0..1.0);
            }
        }
        observations.push(o);
        let pose = DiscretePose::new(0, rng.random_range(0..size), rng.random_range(0..size));
        masks.push(roi_mask(pose, roi, size, size)?);
    }
    Ok(EpisodeInputs {
        observations,
        masks,
        truth,
    })
}
