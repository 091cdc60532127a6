//! Differentiable Fourier-operator building blocks.
//!
//! Every layer exposes a forward pass that returns its output together with
//! whatever it needs to run backwards, and a backward pass that maps an
//! upstream gradient to the input gradient and optionally accumulates
//! parameter gradients into a flat buffer laid out like [`Params`].
//! Composite networks chain these caches explicitly.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::fft::{half_plane_weight, signed_freq, Fft3};
use crate::field::{Field, Grid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSlot {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamSlot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// All learnable arrays of a network in one flat buffer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params {
    data: Vec<f64>,
    slots: Vec<ParamSlot>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let slot = ParamSlot {
            name: name.to_string(),
            offset: self.data.len(),
            shape: shape.to_vec(),
        };
        self.data.resize(self.data.len() + slot.len(), 0.0);
        self.slots.push(slot);
        ParamId(self.slots.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        let s = &self.slots[id.0];
        &self.data[s.offset..s.offset + s.len()]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        let s = &self.slots[id.0];
        let (a, b) = (s.offset, s.offset + s.len());
        &mut self.data[a..b]
    }

    pub fn slot(&self, id: ParamId) -> &ParamSlot {
        &self.slots[id.0]
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.slots.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.data.len()]
    }

    /// Replace all values; the layout must match.
    pub fn load(&mut self, slots: &[ParamSlot], data: Vec<f64>) -> Result<()> {
        ensure!(slots == self.slots.as_slice(), Data, "parameter layout does not match the model configuration");
        ensure!(data.len() == self.data.len(), Data, "expected {} parameters, found {}", self.data.len(), data.len());
        self.data = data;
        Ok(())
    }
}

fn grad_slot<'a>(params: &Params, grads: &'a mut [f64], id: ParamId) -> &'a mut [f64] {
    let s = params.slot(id);
    &mut grads[s.offset..s.offset + s.len()]
}

/// Row-major `c = a·b + beta·c` with optional transposed operands.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the strides above address exactly the m×k, k×n and m×n
    // row-major blocks whose lengths are checked by the callers.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

pub fn gelu_deriv(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    0.5 * (1.0 + libm::erf(x / SQRT_2)) + x * pdf
}

/// GELU applied in place. Derivatives are only formed on the first
/// backward pass, so forward-only evaluations skip them.
#[derive(Debug, Clone)]
struct Activation {
    pre: Vec<f64>,
    deriv: OnceLock<Vec<f64>>,
}

impl Activation {
    fn apply(x: &mut Field) -> Self {
        let pre = x.data().to_vec();
        x.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        Self {
            pre,
            deriv: OnceLock::new(),
        }
    }

    fn backward(&self, g: &mut Field) {
        let d = self.deriv.get_or_init(|| self.pre.iter().map(|x| gelu_deriv(*x)).collect());
        g.data_mut().iter_mut().zip(d).for_each(|(g, d)| *g *= d);
    }
}

fn uniform_fill(xs: &mut [f64], lo: f64, hi: f64, rng: &mut impl Rng) {
    for x in xs {
        *x = rng.random_range(lo..hi);
    }
}

/// Pointwise (1×1×1) linear map with weight normalization
/// `W[o] = g[o] · v[o] / ‖v[o]‖` and optional bias.
#[derive(Debug, Clone)]
pub struct Linear {
    pub c_in: usize,
    pub c_out: usize,
    v: ParamId,
    g: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    pub fn new(params: &mut Params, name: &str, c_in: usize, c_out: usize, bias: bool) -> Self {
        Self {
            c_in,
            c_out,
            v: params.add(&format!("{name}.v"), &[c_out, c_in]),
            g: params.add(&format!("{name}.g"), &[c_out]),
            b: bias.then(|| params.add(&format!("{name}.b"), &[c_out])),
        }
    }

    pub fn param_count(c_in: usize, c_out: usize, bias: bool) -> usize {
        c_out * c_in + c_out + if bias { c_out } else { 0 }
    }

    /// Fan-in uniform init; magnitudes start at the direction norms so the
    /// initial effective weight equals `v`.
    pub fn init(&self, params: &mut Params, rng: &mut impl Rng) {
        let bound = 1.0 / (self.c_in as f64).sqrt();
        uniform_fill(params.get_mut(self.v), -bound, bound, rng);
        let norms: Vec<f64> = params
            .get(self.v)
            .chunks(self.c_in)
            .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        params.get_mut(self.g).copy_from_slice(&norms);
        if let Some(b) = self.b {
            uniform_fill(params.get_mut(b), -bound, bound, rng);
        }
    }

    pub fn weight(&self, params: &Params) -> Vec<f64> {
        let v = params.get(self.v);
        let g = params.get(self.g);
        let mut w = v.to_vec();
        for (o, row) in w.chunks_mut(self.c_in).enumerate() {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            let s = if n > 0.0 { g[o] / n } else { 0.0 };
            row.iter_mut().for_each(|x| *x *= s);
        }
        w
    }

    pub fn forward(&self, params: &Params, x: &Field) -> Result<Field> {
        ensure!(x.channels() == self.c_in, Shape, "linear layer expects {} channels, got {}", self.c_in, x.channels());
        let n = x.voxels();
        let mut y = Field::zeros(self.c_out, x.grid());
        if let Some(b) = self.b {
            for (o, &bo) in params.get(b).iter().enumerate() {
                y.channel_mut(o).fill(bo);
            }
        }
        let w = self.weight(params);
        gemm(self.c_out, self.c_in, n, &w, false, x.data(), false, 1.0, y.data_mut());
        Ok(y)
    }

    /// Input gradient, plus parameter gradients when `grads` is given.
    pub fn backward(&self, params: &Params, x: &Field, gy: &Field, grads: Option<&mut [f64]>) -> Field {
        let n = x.voxels();
        let w = self.weight(params);
        let mut gx = Field::zeros(self.c_in, x.grid());
        gemm(self.c_in, self.c_out, n, &w, true, gy.data(), false, 0.0, gx.data_mut());
        if let Some(grads) = grads {
            let mut gw = vec![0.0; self.c_out * self.c_in];
            gemm(self.c_out, n, self.c_in, gy.data(), false, x.data(), true, 0.0, &mut gw);
            self.weight_norm_backward(params, &gw, grads);
            if let Some(b) = self.b {
                let gb = grad_slot(params, grads, b);
                for (o, acc) in gb.iter_mut().enumerate() {
                    *acc += gy.channel(o).iter().sum::<f64>();
                }
            }
        }
        gx
    }

    fn weight_norm_backward(&self, params: &Params, gw: &[f64], grads: &mut [f64]) {
        let v = params.get(self.v);
        let g = params.get(self.g);
        let mut gv = vec![0.0; v.len()];
        let mut gg = vec![0.0; g.len()];
        for o in 0..self.c_out {
            let row = &v[o * self.c_in..(o + 1) * self.c_in];
            let grow = &gw[o * self.c_in..(o + 1) * self.c_in];
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 {
                continue;
            }
            let s: f64 = row.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>() / n;
            gg[o] = s;
            for j in 0..self.c_in {
                gv[o * self.c_in + j] = g[o] / n * (grow[j] - s * row[j] / n);
            }
        }
        grad_slot(params, grads, self.v).iter_mut().zip(&gv).for_each(|(a, b)| *a += b);
        grad_slot(params, grads, self.g).iter_mut().zip(&gg).for_each(|(a, b)| *a += b);
    }
}

/// Single-group normalization: per sample, the statistics run over all
/// channels and voxels, followed by a per-channel affine map.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub channels: usize,
    pub eps: f64,
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone)]
pub struct NormCache {
    xhat: Field,
    inv_std: f64,
}

impl NormCache {
    pub fn normalized(&self) -> &Field {
        &self.xhat
    }
}

impl GroupNorm {
    pub fn new(params: &mut Params, name: &str, channels: usize) -> Self {
        Self {
            channels,
            eps: 1e-5,
            gamma: params.add(&format!("{name}.gamma"), &[channels]),
            beta: params.add(&format!("{name}.beta"), &[channels]),
        }
    }

    pub fn init(&self, params: &mut Params) {
        params.get_mut(self.gamma).fill(1.0);
        params.get_mut(self.beta).fill(0.0);
    }

    pub fn forward(&self, params: &Params, x: &Field) -> Result<(Field, NormCache)> {
        ensure!(x.channels() == self.channels, Shape, "norm expects {} channels, got {}", self.channels, x.channels());
        let count = x.data().len() as f64;
        let mean = x.data().iter().sum::<f64>() / count;
        let var = x.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
        let inv_std = 1.0 / (var + self.eps).sqrt();
        let mut xhat = x.clone();
        xhat.data_mut().iter_mut().for_each(|v| *v = (*v - mean) * inv_std);
        let mut y = xhat.clone();
        let (gamma, beta) = (params.get(self.gamma), params.get(self.beta));
        for c in 0..self.channels {
            y.channel_mut(c).iter_mut().for_each(|v| *v = gamma[c] * *v + beta[c]);
        }
        Ok((y, NormCache { xhat, inv_std }))
    }

    pub fn backward(&self, params: &Params, cache: &NormCache, gy: &Field, grads: Option<&mut [f64]>) -> Field {
        let gamma = params.get(self.gamma);
        let mut gxhat = gy.clone();
        for c in 0..self.channels {
            gxhat.channel_mut(c).iter_mut().for_each(|v| *v *= gamma[c]);
        }
        if let Some(grads) = grads {
            let gg: Vec<f64> = (0..self.channels)
                .map(|c| gy.channel(c).iter().zip(cache.xhat.channel(c)).map(|(a, b)| a * b).sum())
                .collect();
            grad_slot(params, grads, self.gamma).iter_mut().zip(&gg).for_each(|(a, b)| *a += b);
            let gb = grad_slot(params, grads, self.beta);
            for (c, acc) in gb.iter_mut().enumerate() {
                *acc += gy.channel(c).iter().sum::<f64>();
            }
        }
        let count = gy.data().len() as f64;
        let m1 = gxhat.data().iter().sum::<f64>() / count;
        let m2 = gxhat.data().iter().zip(cache.xhat.data()).map(|(a, b)| a * b).sum::<f64>() / count;
        let mut gx = gxhat;
        for (g, xh) in gx.data_mut().iter_mut().zip(cache.xhat.data()) {
            *g = cache.inv_std * (*g - m1 - xh * m2);
        }
        gx
    }
}

/// Spectral convolution `F⁻¹[R · F[v]]` with a complex channel-mixing matrix
/// per retained real-FFT mode. Weights are stored as
/// `[c_in, c_out, mx, my, mzr, (re, im)]`.
#[derive(Debug, Clone)]
pub struct SpectralConv {
    pub c_in: usize,
    pub c_out: usize,
    /// Stored mode extents `(nx, ny, nz/2 + 1)` of the native grid.
    pub modes: [usize; 3],
    w: ParamId,
}

#[derive(Debug, Clone)]
pub struct SpectralCache {
    spec: Vec<Complex64>,
    map: Vec<(usize, usize)>,
    identity: bool,
}

impl SpectralConv {
    /// All modes of the real FFT on `grid` (no truncation).
    pub fn new(params: &mut Params, name: &str, c_in: usize, c_out: usize, grid: Grid) -> Self {
        let modes = [grid.nx, grid.ny, grid.nz / 2 + 1];
        Self {
            c_in,
            c_out,
            modes,
            w: params.add(&format!("{name}.r"), &[c_in, c_out, modes[0], modes[1], modes[2], 2]),
        }
    }

    pub fn stored_modes(&self) -> usize {
        self.modes.iter().product()
    }

    pub fn param_count(c_in: usize, c_out: usize, grid: Grid) -> usize {
        2 * c_in * c_out * grid.half_modes()
    }

    /// Real and imaginary parts uniform on `[0, alpha]`.
    pub fn init(&self, params: &mut Params, rng: &mut impl Rng, alpha: f64) {
        uniform_fill(params.get_mut(self.w), 0.0, alpha, rng);
    }

    /// Stored-mode to grid-mode correspondence. Stored x/y modes keep their
    /// signed frequency, which zero-pads the weights on finer grids.
    fn mode_map(&self, grid: Grid) -> Result<Vec<(usize, usize)>> {
        let [mx, my, mz] = self.modes;
        let nzr = grid.nz / 2 + 1;
        ensure!(
            grid.nx >= mx && grid.ny >= my && nzr >= mz,
            Shape,
            "grid {} is coarser than the stored spectral modes {}x{}x{}",
            grid,
            mx,
            my,
            mz
        );
        let mut map = Vec::with_capacity(mx * my * mz);
        for a in 0..mx {
            let ix = signed_freq(a, mx).rem_euclid(grid.nx as i64) as usize;
            for b in 0..my {
                let iy = signed_freq(b, my).rem_euclid(grid.ny as i64) as usize;
                for c in 0..mz {
                    map.push(((a * my + b) * mz + c, (ix * grid.ny + iy) * nzr + c));
                }
            }
        }
        Ok(map)
    }

    pub fn forward(&self, params: &Params, v: &Field) -> Result<(Field, SpectralCache)> {
        ensure!(v.channels() == self.c_in, Shape, "spectral conv expects {} channels, got {}", self.c_in, v.channels());
        let grid = v.grid();
        let map = self.mode_map(grid)?;
        let identity = map.iter().all(|&(sm, gm)| sm == gm) && map.len() == grid.half_modes();
        let plan = Fft3::for_grid(grid);
        let h = plan.half_len();
        let mut spec = vec![Complex64::new(0.0, 0.0); self.c_in * h];
        for i in 0..self.c_in {
            plan.forward(v.channel(i), &mut spec[i * h..(i + 1) * h]);
        }
        let r = params.get(self.w);
        let s = self.stored_modes();
        let mut out_spec = vec![Complex64::new(0.0, 0.0); self.c_out * h];
        for i in 0..self.c_in {
            let vi = &spec[i * h..(i + 1) * h];
            for o in 0..self.c_out {
                let rio = &r[(i * self.c_out + o) * s * 2..(i * self.c_out + o + 1) * s * 2];
                let yo = &mut out_spec[o * h..(o + 1) * h];
                if identity {
                    for ((w, x), y) in rio.chunks_exact(2).zip(vi).zip(yo.iter_mut()) {
                        *y += Complex64::new(w[0], w[1]) * x;
                    }
                } else {
                    for &(sm, gm) in &map {
                        yo[gm] += Complex64::new(rio[2 * sm], rio[2 * sm + 1]) * vi[gm];
                    }
                }
            }
        }
        let mut out = Field::zeros(self.c_out, grid);
        for o in 0..self.c_out {
            plan.inverse(&mut out_spec[o * h..(o + 1) * h], out.channel_mut(o));
        }
        Ok((out, SpectralCache { spec, map, identity }))
    }

    pub fn backward(&self, params: &Params, cache: &SpectralCache, gu: &Field, grads: Option<&mut [f64]>) -> Field {
        let grid = gu.grid();
        let plan = Fft3::for_grid(grid);
        let h = plan.half_len();
        let mut gspec = vec![Complex64::new(0.0, 0.0); self.c_out * h];
        for o in 0..self.c_out {
            plan.forward(gu.channel(o), &mut gspec[o * h..(o + 1) * h]);
        }
        let r = params.get(self.w);
        let s = self.stored_modes();
        let mut gv_spec = vec![Complex64::new(0.0, 0.0); self.c_in * h];
        for i in 0..self.c_in {
            let gvi = &mut gv_spec[i * h..(i + 1) * h];
            for o in 0..self.c_out {
                let rio = &r[(i * self.c_out + o) * s * 2..(i * self.c_out + o + 1) * s * 2];
                let go = &gspec[o * h..(o + 1) * h];
                if cache.identity {
                    for ((w, g), y) in rio.chunks_exact(2).zip(go).zip(gvi.iter_mut()) {
                        *y += Complex64::new(w[0], -w[1]) * g;
                    }
                } else {
                    for &(sm, gm) in &cache.map {
                        gvi[gm] += Complex64::new(rio[2 * sm], -rio[2 * sm + 1]) * go[gm];
                    }
                }
            }
        }
        if let Some(grads) = grads {
            let norm = 1.0 / grid.voxels() as f64;
            let nzr = plan.nzr();
            let weights: Vec<f64> = cache.map.iter().map(|&(_, gm)| norm * half_plane_weight(gm % nzr, grid.nz)).collect();
            let gr = grad_slot(params, grads, self.w);
            for i in 0..self.c_in {
                let vi = &cache.spec[i * h..(i + 1) * h];
                for o in 0..self.c_out {
                    let go = &gspec[o * h..(o + 1) * h];
                    let gro = &mut gr[(i * self.c_out + o) * s * 2..(i * self.c_out + o + 1) * s * 2];
                    for (&(sm, gm), &c) in cache.map.iter().zip(&weights) {
                        let z = go[gm] * vi[gm].conj() * c;
                        gro[2 * sm] += z.re;
                        gro[2 * sm + 1] += z.im;
                    }
                }
            }
        }
        let mut gv = Field::zeros(self.c_in, grid);
        for i in 0..self.c_in {
            plan.inverse(&mut gv_spec[i * h..(i + 1) * h], gv.channel_mut(i));
        }
        gv
    }
}

/// `GELU(W v + K v + inject(lift))`.
#[derive(Debug, Clone)]
pub struct FourierLayer {
    pub pointwise: Linear,
    pub spectral: SpectralConv,
    pub inject: Linear,
}

#[derive(Debug, Clone)]
pub struct LayerCache {
    input: Field,
    spectral: SpectralCache,
    act: Activation,
}

impl FourierLayer {
    pub fn new(params: &mut Params, name: &str, width: usize, lift_width: usize, grid: Grid) -> Self {
        Self {
            pointwise: Linear::new(params, &format!("{name}.w"), width, width, true),
            spectral: SpectralConv::new(params, &format!("{name}.k"), width, width, grid),
            inject: Linear::new(params, &format!("{name}.inject"), lift_width, width, false),
        }
    }

    pub fn init(&self, params: &mut Params, rng: &mut impl Rng, alpha: f64) {
        self.pointwise.init(params, rng);
        self.spectral.init(params, rng, alpha);
        self.inject.init(params, rng);
    }

    pub fn forward(&self, params: &Params, v: &Field, lift: &Field) -> Result<(Field, LayerCache)> {
        let mut pre = self.pointwise.forward(params, v)?;
        let (k, spectral) = self.spectral.forward(params, v)?;
        let inj = self.inject.forward(params, lift)?;
        for ((p, k), j) in pre.data_mut().iter_mut().zip(k.data()).zip(inj.data()) {
            *p += k + j;
        }
        let act = Activation::apply(&mut pre);
        Ok((
            pre,
            LayerCache {
                input: v.clone(),
                spectral,
                act,
            },
        ))
    }

    /// Returns the gradients with respect to `v` and `lift`.
    pub fn backward(&self, params: &Params, cache: &LayerCache, lift: &Field, gy: &Field, mut grads: Option<&mut [f64]>) -> (Field, Field) {
        let mut gpre = gy.clone();
        cache.act.backward(&mut gpre);
        let mut gv = self.pointwise.backward(params, &cache.input, &gpre, grads.as_deref_mut());
        let gk = self.spectral.backward(params, &cache.spectral, &gpre, grads.as_deref_mut());
        gv.data_mut().iter_mut().zip(gk.data()).for_each(|(a, b)| *a += b);
        let glift = self.inject.backward(params, lift, &gpre, grads);
        (gv, glift)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub c_in: usize,
    pub width: usize,
    pub depth: usize,
    pub hidden: usize,
    pub c_out: usize,
    /// Native grid; it fixes the stored spectral modes.
    pub grid: Grid,
    pub alpha: f64,
}

impl NetConfig {
    pub fn new(c_in: usize, width: usize, depth: usize, grid: Grid) -> Self {
        Self {
            c_in,
            width,
            depth,
            hidden: 128,
            c_out: 6,
            grid,
            alpha: 0.1,
        }
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (w, c, m) = (self.width, self.c_in, self.grid.half_modes());
        let lifting = 2 * c + (w * c + 2 * w);
        let layer = (w * w + 2 * w) + 2 * w * w * m + (w * w + w);
        let projection = (self.hidden * w + 2 * self.hidden) + (self.c_out * self.hidden + 2 * self.c_out);
        lifting + self.depth * layer + projection
    }
}

/// Lifting `P`, body `B_n` of input-injected Fourier layers, and projection `Q`.
#[derive(Debug, Clone)]
pub struct Network {
    pub config: NetConfig,
    norm: GroupNorm,
    lift: Linear,
    layers: Vec<FourierLayer>,
    proj_hidden: Linear,
    proj_out: Linear,
    body_calls: Arc<AtomicUsize>,
}

#[derive(Debug, Clone)]
pub struct LiftCache {
    norm: NormCache,
    normed: Field,
}

#[derive(Debug, Clone)]
pub struct BodyCache {
    layers: Vec<LayerCache>,
}

#[derive(Debug, Clone)]
pub struct ProjCache {
    input: Field,
    hidden: Field,
    act: Activation,
}

impl Network {
    pub fn new(config: NetConfig, params: &mut Params) -> Result<Self> {
        ensure!(config.c_in >= 1 && config.width >= 1 && config.depth >= 1, InvalidArgument, "network needs positive channels, width and depth");
        ensure!(config.alpha > 0.0, InvalidArgument, "spectral init scale must be positive");
        let w = config.width;
        Ok(Self {
            config,
            norm: GroupNorm::new(params, "lift.norm", config.c_in),
            lift: Linear::new(params, "lift.linear", config.c_in, w, true),
            layers: (0..config.depth)
                .map(|k| FourierLayer::new(params, &format!("layer{k}"), w, w, config.grid))
                .collect(),
            proj_hidden: Linear::new(params, "proj.hidden", w, config.hidden, true),
            proj_out: Linear::new(params, "proj.out", config.hidden, config.c_out, true),
            body_calls: Arc::new(AtomicUsize::new(0)),
        })
    }

    pub fn init(&self, params: &mut Params, rng: &mut impl Rng) {
        self.norm.init(params);
        self.lift.init(params, rng);
        for l in &self.layers {
            l.init(params, rng, self.config.alpha);
        }
        self.proj_hidden.init(params, rng);
        self.proj_out.init(params, rng);
    }

    pub fn lift(&self, params: &Params, x: &Field) -> Result<(Field, LiftCache)> {
        let (normed, norm) = self.norm.forward(params, x)?;
        let y = self.lift.forward(params, &normed)?;
        Ok((y, LiftCache { norm, normed }))
    }

    pub fn lift_backward(&self, params: &Params, cache: &LiftCache, gy: &Field, mut grads: Option<&mut [f64]>) -> Field {
        let gn = self.lift.backward(params, &cache.normed, gy, grads.as_deref_mut());
        self.norm.backward(params, &cache.norm, &gn, grads)
    }

    /// Number of body evaluations so far (shared between clones).
    pub fn body_calls(&self) -> usize {
        self.body_calls.load(Ordering::Relaxed)
    }

    pub fn body(&self, params: &Params, h: &Field, inject: &Field) -> Result<(Field, BodyCache)> {
        self.body_calls.fetch_add(1, Ordering::Relaxed);
        let mut x = h.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (y, c) = l.forward(params, &x, inject)?;
            caches.push(c);
            x = y;
        }
        Ok((x, BodyCache { layers: caches }))
    }

    /// Gradients with respect to `h` and the injected field.
    pub fn body_backward(&self, params: &Params, cache: &BodyCache, inject: &Field, gy: &Field, mut grads: Option<&mut [f64]>) -> (Field, Field) {
        let mut g = gy.clone();
        let mut ginj = Field::zeros(inject.channels(), inject.grid());
        for (l, c) in self.layers.iter().zip(&cache.layers).rev() {
            let (gv, gl) = l.backward(params, c, inject, &g, grads.as_deref_mut());
            ginj.data_mut().iter_mut().zip(gl.data()).for_each(|(a, b)| *a += b);
            g = gv;
        }
        (g, ginj)
    }

    pub fn project(&self, params: &Params, h: &Field) -> Result<(Field, ProjCache)> {
        let mut hidden = self.proj_hidden.forward(params, h)?;
        let act = Activation::apply(&mut hidden);
        let y = self.proj_out.forward(params, &hidden)?;
        Ok((
            y,
            ProjCache {
                input: h.clone(),
                hidden,
                act,
            },
        ))
    }

    /// Projection without a backward cache, evaluated in voxel blocks so the
    /// wide hidden layer stays in cache.
    pub fn project_only(&self, params: &Params, h: &Field) -> Result<Field> {
        ensure!(h.channels() == self.config.width, Shape, "projection expects {} channels, got {}", self.config.width, h.channels());
        const BLOCK: usize = 256;
        let (w1, w2) = (self.proj_hidden.weight(params), self.proj_out.weight(params));
        let b1 = params.get(self.proj_hidden.b.expect("projection layers have biases"));
        let b2 = params.get(self.proj_out.b.expect("projection layers have biases"));
        let (c_in, hid, c_out, n) = (self.config.width, self.config.hidden, self.config.c_out, h.voxels());
        let mut out = Field::zeros(c_out, h.grid());
        let mut buf = vec![0.0; hid * BLOCK];
        let mut ybuf = vec![0.0; c_out * BLOCK];
        for v0 in (0..n).step_by(BLOCK) {
            let b = BLOCK.min(n - v0);
            for (o, &bo) in b1.iter().enumerate() {
                buf[o * b..(o + 1) * b].fill(bo);
            }
            // SAFETY: A is hid×c_in row-major, B addresses c_in rows of b
            // voxels with row stride n inside `h`, C is hid×b contiguous.
            unsafe {
                matrixmultiply::dgemm(hid, c_in, b, 1.0, w1.as_ptr(), c_in as isize, 1, h.data().as_ptr().add(v0), n as isize, 1, 1.0, buf.as_mut_ptr(), b as isize, 1);
            }
            buf[..hid * b].iter_mut().for_each(|x| *x = gelu(*x));
            for (o, &bo) in b2.iter().enumerate() {
                ybuf[o * b..(o + 1) * b].fill(bo);
            }
            gemm(c_out, hid, b, &w2, false, &buf[..hid * b], false, 1.0, &mut ybuf[..c_out * b]);
            for o in 0..c_out {
                out.channel_mut(o)[v0..v0 + b].copy_from_slice(&ybuf[o * b..(o + 1) * b]);
            }
        }
        Ok(out)
    }

    pub fn project_backward(&self, params: &Params, cache: &ProjCache, gy: &Field, mut grads: Option<&mut [f64]>) -> Field {
        let mut gh = self.proj_out.backward(params, &cache.hidden, gy, grads.as_deref_mut());
        cache.act.backward(&mut gh);
        self.proj_hidden.backward(params, &cache.input, &gh, grads)
    }

    /// `Q(B_n(P(x)))` with the lifted input injected into every layer.
    pub fn forward(&self, params: &Params, x: &Field) -> Result<Field> {
        let (lifted, _) = self.lift(params, x)?;
        let (h, _) = self.body(params, &lifted, &lifted)?;
        self.project_only(params, &h)
    }
}

/// Maximum relative mismatch between reverse-mode directional derivatives
/// `∇f(x)·d` and central differences over random unit directions.
pub fn grad_check<F, G>(f: F, grad: G, x: &[f64], directions: usize, step: f64, rng: &mut impl Rng) -> f64
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    let g = grad(x);
    let mut worst: f64 = 0.0;
    for _ in 0..directions {
        let mut d: Vec<f64> = (0..x.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        d.iter_mut().for_each(|v| *v /= n);
        let plus: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + step * b).collect();
        let minus: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a - step * b).collect();
        let fd = (f(&plus) - f(&minus)) / (2.0 * step);
        let ad: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
        let denom = fd.abs().max(ad.abs()).max(1e-12);
        worst = worst.max((fd - ad).abs() / denom);
    }
    worst
}
