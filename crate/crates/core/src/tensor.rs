//! Dense multi-channel grids and the handful of operators the SLAM loop is
//! built from: cross-correlation against a kernel stack, its adjoint,
//! softmax normalizations and bilinear rotation.
//!
//! Layout is row-major with the channel plane outermost: element
//! `(c, x, y)` lives at `(c * height + x) * width + y`. `x` indexes rows and
//! `y` columns throughout the crate.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A `C x H x W` block of doubles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid3 {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Grid3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(
                "Grid3::from_vec",
                format!(
                    "{} values for a {}x{}x{} grid",
                    data.len(),
                    channels,
                    height,
                    width
                ),
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn index(&self, c: usize, x: usize, y: usize) -> usize {
        debug_assert!(c < self.channels && x < self.height && y < self.width);
        (c * self.height + x) * self.width + y
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f64 {
        self.data[self.index(c, x, y)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, value: f64) {
        let i = self.index(c, x, y);
        self.data[i] = value;
    }

    #[inline]
    pub fn add_at(&mut self, c: usize, x: usize, y: usize, value: f64) {
        let i = self.index(c, x, y);
        self.data[i] += value;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// One channel plane as a `H * W` slice.
    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Grid3) -> bool {
        self.shape() == other.shape()
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Grid3) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(Error::shape(
                "Grid3::dot",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid3 {
        Grid3 {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Channel vector of one spatial cell.
    pub fn cell(&self, x: usize, y: usize) -> Vec<f64> {
        (0..self.channels).map(|c| self.get(c, x, y)).collect()
    }
}

/// `R` kernels of shape `L x h x h`, one per rotation hypothesis (or per
/// output channel when used as an ordinary convolution weight).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelStack {
    rotations: usize,
    channels: usize,
    size: usize,
    data: Vec<f64>,
}

impl KernelStack {
    pub fn zeros(rotations: usize, channels: usize, size: usize) -> Result<Self> {
        Self::from_vec(
            rotations,
            channels,
            size,
            vec![0.0; rotations * channels * size * size],
        )
    }

    pub fn from_vec(rotations: usize, channels: usize, size: usize, data: Vec<f64>) -> Result<Self> {
        if size % 2 == 0 {
            return Err(Error::shape(
                "KernelStack",
                format!("kernel size {size} must be odd"),
            ));
        }
        if data.len() != rotations * channels * size * size {
            return Err(Error::shape(
                "KernelStack",
                format!(
                    "{} values for a {}x{}x{}x{} stack",
                    data.len(),
                    rotations,
                    channels,
                    size,
                    size
                ),
            ));
        }
        Ok(Self {
            rotations,
            channels,
            size,
            data,
        })
    }

    /// Stacks equally shaped square `L x h x h` grids.
    pub fn from_slices(slices: &[Grid3]) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::shape("KernelStack::from_slices", "empty slice list"))?;
        let (l, h, w) = first.shape();
        if h != w {
            return Err(Error::shape(
                "KernelStack::from_slices",
                format!("slice is {h}x{w}, not square"),
            ));
        }
        let mut data = Vec::with_capacity(slices.len() * l * h * h);
        for s in slices {
            if s.shape() != (l, h, w) {
                return Err(Error::shape(
                    "KernelStack::from_slices",
                    format!("{:?} vs {:?}", s.shape(), first.shape()),
                ));
            }
            data.extend_from_slice(s.data());
        }
        Self::from_vec(slices.len(), l, h, data)
    }

    #[inline]
    pub fn rotations(&self) -> usize {
        self.rotations
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn half(&self) -> usize {
        self.size / 2
    }

    #[inline]
    pub fn index(&self, r: usize, l: usize, i: usize, j: usize) -> usize {
        ((r * self.channels + l) * self.size + i) * self.size + j
    }

    #[inline]
    pub fn get(&self, r: usize, l: usize, i: usize, j: usize) -> f64 {
        self.data[self.index(r, l, i, j)]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn slice(&self, r: usize) -> Grid3 {
        let n = self.channels * self.size * self.size;
        Grid3::from_vec(
            self.channels,
            self.size,
            self.size,
            self.data[r * n..(r + 1) * n].to_vec(),
        )
        .expect("slice shape is consistent")
    }
}

/// Rectangular set of output cells, half-open in both axes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    pub rows: Range<usize>,
    pub cols: Range<usize>,
}

impl Window {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            rows: 0..height,
            cols: 0..width,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty() || self.cols.is_empty()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        self.rows.contains(&x) && self.cols.contains(&y)
    }
}

/// Kernel offsets `i` in `0..size` for which `x + i - half` lands in `0..extent`.
#[inline]
fn valid_taps(x: usize, half: usize, size: usize, extent: usize) -> Range<usize> {
    let lo = half.saturating_sub(x);
    let hi = (extent + half).saturating_sub(x).min(size);
    lo..hi.max(lo)
}

fn check_correlate(op: &'static str, map: &Grid3, kernels: &KernelStack) -> Result<()> {
    if map.channels() != kernels.channels() {
        return Err(Error::shape(
            op,
            format!(
                "map has {} channels, kernels expect {}",
                map.channels(),
                kernels.channels()
            ),
        ));
    }
    Ok(())
}

/// Same-size cross-correlation of an `L x H x W` map with every kernel of an
/// `R x L x h x h` stack:
///
/// `out(r,x,y) = sum_{l,i,j} map(l, x+i-h/2, y+j-h/2) * k(r,l,i,j)`
///
/// with zero padding (out-of-range map reads contribute nothing). The kernel
/// is not flipped.
pub fn correlate(map: &Grid3, kernels: &KernelStack) -> Result<Grid3> {
    correlate_in(map, kernels, &Window::full(map.height(), map.width()))
}

/// [`correlate`] restricted to the output cells of `window`; every other
/// output cell is zero.
pub fn correlate_in(map: &Grid3, kernels: &KernelStack, window: &Window) -> Result<Grid3> {
    check_correlate("correlate", map, kernels)?;
    let (lc, hh, ww) = map.shape();
    if window.rows.end > hh || window.cols.end > ww {
        return Err(Error::shape(
            "correlate",
            format!("window {window:?} exceeds {hh}x{ww}"),
        ));
    }
    let size = kernels.size();
    let half = kernels.half();
    let mut out = Grid3::zeros(kernels.rotations(), hh, ww);
    for r in 0..kernels.rotations() {
        for x in window.rows.clone() {
            let ti = valid_taps(x, half, size, hh);
            for y in window.cols.clone() {
                let tj = valid_taps(y, half, size, ww);
                let mut acc = 0.0;
                for l in 0..lc {
                    for i in ti.clone() {
                        let mx = x + i - half;
                        let row = &map.data()[map.index(l, mx, 0)..];
                        let krow = &kernels.data()[kernels.index(r, l, i, 0)..];
                        for j in tj.clone() {
                            acc += row[y + j - half] * krow[j];
                        }
                    }
                }
                out.set(r, x, y, acc);
            }
        }
    }
    Ok(out)
}

/// Linear adjoint of [`correlate`] in its map argument:
///
/// `out(l,u,v) = sum_{r,x,y} belief(r,x,y) * k(r, l, u-x+h/2, v-y+h/2)`
///
/// Each kernel slice is stamped onto the map centred at every pose, weighted
/// by the belief. Stamps are clipped at the map border.
pub fn adjoint_project(belief: &Grid3, kernels: &KernelStack) -> Result<Grid3> {
    if belief.channels() != kernels.rotations() {
        return Err(Error::shape(
            "adjoint_project",
            format!(
                "belief has {} channels, stack has {} rotations",
                belief.channels(),
                kernels.rotations()
            ),
        ));
    }
    let (_, hh, ww) = belief.shape();
    let lc = kernels.channels();
    let size = kernels.size();
    let half = kernels.half();
    let mut out = Grid3::zeros(lc, hh, ww);
    for r in 0..kernels.rotations() {
        for x in 0..hh {
            let ti = valid_taps(x, half, size, hh);
            for y in 0..ww {
                let b = belief.get(r, x, y);
                if b == 0.0 {
                    continue;
                }
                let tj = valid_taps(y, half, size, ww);
                for l in 0..lc {
                    for i in ti.clone() {
                        let u = x + i - half;
                        let base = out.index(l, u, 0);
                        let kbase = kernels.index(r, l, i, 0);
                        for j in tj.clone() {
                            out.data[base + y + j - half] += b * kernels.data[kbase + j];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of `<grad_out, correlate_in(input, K, window)>` with respect to
/// `K`: `dK(r,l,i,j) = sum_{(x,y) in window} grad_out(r,x,y) * input(l, x+i-h/2, y+j-h/2)`.
pub fn kernel_gradient(
    grad_out: &Grid3,
    input: &Grid3,
    size: usize,
    window: &Window,
) -> Result<KernelStack> {
    if grad_out.height() != input.height() || grad_out.width() != input.width() {
        return Err(Error::shape(
            "kernel_gradient",
            format!("{:?} vs {:?}", grad_out.shape(), input.shape()),
        ));
    }
    let mut dk = KernelStack::zeros(grad_out.channels(), input.channels(), size)?;
    let half = size / 2;
    let (lc, hh, ww) = input.shape();
    for r in 0..grad_out.channels() {
        for x in window.rows.clone() {
            let ti = valid_taps(x, half, size, hh);
            for y in window.cols.clone() {
                let g = grad_out.get(r, x, y);
                if g == 0.0 {
                    continue;
                }
                let tj = valid_taps(y, half, size, ww);
                for l in 0..lc {
                    for i in ti.clone() {
                        let row = input.index(l, x + i - half, 0);
                        let kbase = dk.index(r, l, i, 0);
                        for j in tj.clone() {
                            dk.data[kbase + j] += g * input.data[row + y + j - half];
                        }
                    }
                }
            }
        }
    }
    Ok(dk)
}

/// Softmax over every entry of the grid.
pub fn softmax_all(t: &Grid3) -> Grid3 {
    let m = t.max();
    let mut out = t.map(|v| (v - m).exp());
    let z: f64 = out.sum();
    out.data.iter_mut().for_each(|v| *v /= z);
    out
}

/// Softmax over the channel vector of each spatial cell independently.
pub fn softmax_per_cell(t: &Grid3) -> Grid3 {
    let mut out = t.clone();
    for x in 0..t.height() {
        for y in 0..t.width() {
            softmax_cell_in_place(&mut out, x, y);
        }
    }
    out
}

pub(crate) fn softmax_cell_in_place(g: &mut Grid3, x: usize, y: usize) {
    let lc = g.channels();
    let mut m = f64::NEG_INFINITY;
    for c in 0..lc {
        m = m.max(g.get(c, x, y));
    }
    let mut z = 0.0;
    for c in 0..lc {
        let e = (g.get(c, x, y) - m).exp();
        g.set(c, x, y, e);
        z += e;
    }
    for c in 0..lc {
        let v = g.get(c, x, y) / z;
        g.set(c, x, y, v);
    }
}

/// Cosine and sine with values within 1e-12 of -1, 0 or 1 snapped to them,
/// so quarter turns resample on the integer lattice exactly.
fn snapped_trig(angle: f64) -> (f64, f64) {
    let snap = |v: f64| {
        for t in [-1.0, 0.0, 1.0] {
            if (v - t).abs() < 1e-12 {
                return t;
            }
        }
        v
    };
    (snap(angle.cos()), snap(angle.sin()))
}

/// Rotates each channel plane of a square grid counter-clockwise (from the
/// +x row axis toward +y) by `angle` about its centre, by inverse mapping
/// with bilinear interpolation. Samples outside the source read zero.
pub fn rotate_bilinear(obs: &Grid3, angle: f64) -> Result<Grid3> {
    let (lc, hh, ww) = obs.shape();
    if hh != ww {
        return Err(Error::shape(
            "rotate_bilinear",
            format!("{hh}x{ww} is not square"),
        ));
    }
    let (cos, sin) = snapped_trig(angle);
    if cos == 1.0 && sin == 0.0 {
        return Ok(obs.clone());
    }
    let n = hh as isize;
    let center = (hh as f64 - 1.0) / 2.0;
    let mut out = Grid3::zeros(lc, hh, ww);
    for x in 0..hh {
        for y in 0..ww {
            let px = x as f64 - center;
            let py = y as f64 - center;
            let sx = center + px * cos + py * sin;
            let sy = center - px * sin + py * cos;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let (x0, y0) = (x0 as isize, y0 as isize);
            let taps = [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x0, y0 + 1, (1.0 - fx) * fy),
                (x0 + 1, y0, fx * (1.0 - fy)),
                (x0 + 1, y0 + 1, fx * fy),
            ];
            for c in 0..lc {
                let mut acc = 0.0;
                for &(ix, iy, w) in &taps {
                    if w == 0.0 || ix < 0 || iy < 0 || ix >= n || iy >= n {
                        continue;
                    }
                    acc += w * obs.get(c, ix as usize, iy as usize);
                }
                out.set(c, x, y, acc);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Grid3 {
        Grid3::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    fn random_stack(rng: &mut ChaCha8Rng, r: usize, l: usize, h: usize) -> KernelStack {
        KernelStack::from_vec(r, l, h, (0..r * l * h * h).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    /// Six nested loops with explicit bounds checks, same summation order.
    fn correlate_reference(map: &Grid3, k: &KernelStack) -> Grid3 {
        let (lc, hh, ww) = map.shape();
        let half = (k.size() / 2) as isize;
        let mut out = Grid3::zeros(k.rotations(), hh, ww);
        for r in 0..k.rotations() {
            for x in 0..hh {
                for y in 0..ww {
                    let mut acc = 0.0;
                    for l in 0..lc {
                        for i in 0..k.size() {
                            for j in 0..k.size() {
                                let mx = x as isize + i as isize - half;
                                let my = y as isize + j as isize - half;
                                if mx < 0 || my < 0 || mx >= hh as isize || my >= ww as isize {
                                    continue;
                                }
                                acc += map.get(l, mx as usize, my as usize) * k.get(r, l, i, j);
                            }
                        }
                    }
                    out.set(r, x, y, acc);
                }
            }
        }
        out
    }

    #[test]
    fn correlate_delta_kernel_is_identity_on_one_hot() {
        let mut map = Grid3::zeros(3, 7, 7);
        map.set(1, 2, 5, 1.0);
        let mut k = KernelStack::zeros(4, 3, 3).unwrap();
        let idx = k.index(2, 1, 1, 1);
        k.data_mut()[idx] = 1.0;
        let out = correlate(&map, &k).unwrap();
        assert_eq!(out.get(2, 2, 5), 1.0);
        assert_eq!(out.sum(), 1.0);
    }

    #[test]
    fn correlate_zero_kernels_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let map = random_grid(&mut rng, 2, 6, 5);
        let k = KernelStack::zeros(3, 2, 5).unwrap();
        assert!(correlate(&map, &k).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn correlate_matches_loop_reference_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let map = random_grid(&mut rng, 2, 5, 5);
        let k = random_stack(&mut rng, 3, 2, 3);
        assert_eq!(correlate(&map, &k).unwrap(), correlate_reference(&map, &k));
        // kernel larger than the map
        let map = random_grid(&mut rng, 1, 3, 4);
        let k = random_stack(&mut rng, 2, 1, 7);
        assert_eq!(correlate(&map, &k).unwrap(), correlate_reference(&map, &k));
    }

    #[test]
    fn correlate_channel_mismatch_is_an_error() {
        let map = Grid3::zeros(2, 4, 4);
        let k = KernelStack::zeros(1, 3, 3).unwrap();
        assert!(matches!(correlate(&map, &k), Err(Error::Shape { .. })));
        let belief = Grid3::zeros(2, 4, 4);
        assert!(matches!(adjoint_project(&belief, &k), Err(Error::Shape { .. })));
    }

    #[test]
    fn correlate_in_matches_full_inside_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let map = random_grid(&mut rng, 2, 8, 9);
        let k = random_stack(&mut rng, 2, 2, 3);
        let w = Window { rows: 2..5, cols: 0..4 };
        let part = correlate_in(&map, &k, &w).unwrap();
        let full = correlate(&map, &k).unwrap();
        for r in 0..2 {
            for x in 0..8 {
                for y in 0..9 {
                    let expect = if w.contains(x, y) { full.get(r, x, y) } else { 0.0 };
                    assert_eq!(part.get(r, x, y), expect);
                }
            }
        }
    }

    #[test]
    fn adjoint_of_one_hot_stamps_clipped_slice() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k = random_stack(&mut rng, 2, 2, 3);
        let mut belief = Grid3::zeros(2, 5, 5);
        belief.set(1, 0, 2, 1.0);
        let out = adjoint_project(&belief, &k).unwrap();
        for l in 0..2 {
            for u in 0..5 {
                for v in 0..5 {
                    let i = u as isize + 1;
                    let j = v as isize - 2 + 1;
                    let expect = if (0..3).contains(&i) && (0..3).contains(&j) {
                        k.get(1, l, i as usize, j as usize)
                    } else {
                        0.0
                    };
                    assert_eq!(out.get(l, u, v), expect);
                }
            }
        }
        assert!(adjoint_project(&Grid3::zeros(2, 5, 5), &k)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn adjoint_identity_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let m = random_grid(&mut rng, 3, 9, 7);
            let k = random_stack(&mut rng, 4, 3, 5);
            let p = random_grid(&mut rng, 4, 9, 7);
            let lhs = correlate(&m, &k).unwrap().dot(&p).unwrap();
            let rhs = m.dot(&adjoint_project(&p, &k).unwrap()).unwrap();
            assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
        }
    }

    #[test]
    fn kernel_gradient_matches_directional_derivative() {
        // correlate is linear in K, so <dK, E> = <correlate(input, E), g> exactly.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let input = random_grid(&mut rng, 2, 6, 6);
        let g = random_grid(&mut rng, 3, 6, 6);
        let e = random_stack(&mut rng, 3, 2, 3);
        let w = Window { rows: 1..5, cols: 0..6 };
        let dk = kernel_gradient(&g, &input, 3, &w).unwrap();
        let lhs: f64 = dk.data().iter().zip(e.data()).map(|(a, b)| a * b).sum();
        let rhs = correlate_in(&input, &e, &w).unwrap().dot(&g).unwrap();
        assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()));
    }

    #[test]
    fn softmax_all_closed_forms() {
        let t = Grid3::filled(2, 3, 4, 7.5);
        assert!(softmax_all(&t).data().iter().all(|&v| (v - 1.0 / 24.0).abs() < 1e-15));
        let t = Grid3::from_vec(1, 1, 2, vec![0.0, 3f64.ln()]).unwrap();
        let s = softmax_all(&t);
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
        // overflow guard
        let t = Grid3::from_vec(1, 1, 2, vec![1000.0, 1000.0]).unwrap();
        assert_eq!(softmax_all(&t).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_per_cell_closed_forms() {
        let t = Grid3::zeros(2, 2, 2);
        assert!(softmax_per_cell(&t).data().iter().all(|&v| v == 0.5));
        let mut t = Grid3::zeros(2, 1, 2);
        t.set(0, 0, 1, 1f64.ln());
        t.set(1, 0, 1, 9f64.ln());
        let s = softmax_per_cell(&t);
        assert!((s.get(0, 0, 1) - 0.1).abs() < 1e-15);
        assert!((s.get(1, 0, 1) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn rotate_zero_is_identity_and_quarter_turn_permutes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let obs = random_grid(&mut rng, 2, 5, 5);
        assert_eq!(rotate_bilinear(&obs, 0.0).unwrap(), obs);
        let q = rotate_bilinear(&obs, std::f64::consts::FRAC_PI_2).unwrap();
        // out(p) = obs(R(-90)p): offset (px,py) reads (py,-px)
        for c in 0..2 {
            for x in 0..5 {
                for y in 0..5 {
                    assert_eq!(q.get(c, x, y), obs.get(c, y, 4 - x));
                }
            }
        }
        let mut back = obs.clone();
        for _ in 0..4 {
            back = rotate_bilinear(&back, std::f64::consts::FRAC_PI_2).unwrap();
        }
        assert_eq!(back, obs);
    }

    #[test]
    fn rotate_rejects_non_square() {
        assert!(rotate_bilinear(&Grid3::zeros(1, 3, 5), 0.3).is_err());
    }

    #[test]
    fn even_kernel_size_is_rejected() {
        assert!(KernelStack::zeros(1, 1, 4).is_err());
    }
}
