//! Real-input 3D FFT on periodic grids.
//!
//! Convention: the forward transform is unnormalized,
//! `V(k) = Σₓ v(x) e^{-2πi k·x/N}`, and the inverse carries the `1/N³`
//! factor, so `irfft3(rfft3(v)) = v` and `Σ v² = (1/N³) Σ_full |V|²`.
//! Spectra use the half layout `[nx][ny][nz/2 + 1]`; the missing half is
//! implied by Hermitian symmetry.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use rustfft::{Fft, FftPlanner};

use crate::field::Grid;

pub struct Fft3 {
    grid: Grid,
    nzr: usize,
    r2c: Arc<dyn RealToComplex<f64>>,
    c2r: Arc<dyn ComplexToReal<f64>>,
    fwd_x: Arc<dyn Fft<f64>>,
    inv_x: Arc<dyn Fft<f64>>,
    fwd_y: Arc<dyn Fft<f64>>,
    inv_y: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Fft3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft3").field("grid", &self.grid).finish()
    }
}

/// Signed integer frequency of DFT index `k` on an axis of length `n`,
/// in `(-n/2, n/2]`.
#[inline]
pub fn signed_freq(k: usize, n: usize) -> i64 {
    if k <= n / 2 {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

#[inline]
pub fn is_nyquist(k: usize, n: usize) -> bool {
    n % 2 == 0 && k == n / 2
}

/// Multiplicity of a half-spectrum plane in the full spectrum: interior
/// `kz` planes stand for themselves and their mirror image.
#[inline]
pub fn half_plane_weight(kz: usize, nz: usize) -> f64 {
    if kz == 0 || is_nyquist(kz, nz) {
        1.0
    } else {
        2.0
    }
}

impl Fft3 {
    pub fn new(grid: Grid) -> Self {
        let mut rp = RealFftPlanner::<f64>::new();
        let mut cp = FftPlanner::<f64>::new();
        Self {
            grid,
            nzr: grid.nz / 2 + 1,
            r2c: rp.plan_fft_forward(grid.nz),
            c2r: rp.plan_fft_inverse(grid.nz),
            fwd_x: cp.plan_fft_forward(grid.nx),
            inv_x: cp.plan_fft_inverse(grid.nx),
            fwd_y: cp.plan_fft_forward(grid.ny),
            inv_y: cp.plan_fft_inverse(grid.ny),
        }
    }

    /// Shared plan for `grid`; plans are immutable and thread-safe.
    pub fn for_grid(grid: Grid) -> Arc<Fft3> {
        static CACHE: OnceLock<Mutex<HashMap<Grid, Arc<Fft3>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut map = cache.lock().expect("fft plan cache poisoned");
        map.entry(grid).or_insert_with(|| Arc::new(Fft3::new(grid))).clone()
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn half_len(&self) -> usize {
        self.grid.nx * self.grid.ny * self.nzr
    }

    pub fn nzr(&self) -> usize {
        self.nzr
    }

    pub fn forward(&self, input: &[f64], out: &mut [Complex64]) {
        let g = self.grid;
        debug_assert_eq!(input.len(), g.voxels());
        debug_assert_eq!(out.len(), self.half_len());
        let mut line = vec![0.0; g.nz];
        let mut scratch = self.r2c.make_scratch_vec();
        for (l, chunk) in out.chunks_exact_mut(self.nzr).enumerate() {
            line.copy_from_slice(&input[l * g.nz..(l + 1) * g.nz]);
            self.r2c
                .process_with_scratch(&mut line, chunk, &mut scratch)
                .expect("r2c length mismatch");
        }
        self.axis(out, g.nx, g.ny, self.nzr, &*self.fwd_y);
        self.axis(out, 1, g.nx, g.ny * self.nzr, &*self.fwd_x);
    }

    /// Inverse transform. `spec` is used as scratch and left modified.
    pub fn inverse(&self, spec: &mut [Complex64], out: &mut [f64]) {
        let g = self.grid;
        debug_assert_eq!(out.len(), g.voxels());
        self.axis(spec, 1, g.nx, g.ny * self.nzr, &*self.inv_x);
        self.axis(spec, g.nx, g.ny, self.nzr, &*self.inv_y);
        let norm = 1.0 / g.voxels() as f64;
        let mut scratch = self.c2r.make_scratch_vec();
        let even = g.nz % 2 == 0;
        for (l, chunk) in spec.chunks_exact_mut(self.nzr).enumerate() {
            // c2r assumes a Hermitian line; the imaginary parts of the
            // self-conjugate bins do not contribute to the real output.
            chunk[0].im = 0.0;
            if even {
                chunk[self.nzr - 1].im = 0.0;
            }
            let dst = &mut out[l * g.nz..(l + 1) * g.nz];
            self.c2r
                .process_with_scratch(chunk, dst, &mut scratch)
                .expect("c2r length mismatch");
            dst.iter_mut().for_each(|x| *x *= norm);
        }
    }

    pub fn forward_vec(&self, input: &[f64]) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); self.half_len()];
        self.forward(input, &mut out);
        out
    }

    pub fn inverse_vec(&self, mut spec: Vec<Complex64>) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.voxels()];
        self.inverse(&mut spec, &mut out);
        out
    }

    /// Transform along the middle axis of an `[outer][len][inner]` layout.
    fn axis(&self, data: &mut [Complex64], outer: usize, len: usize, inner: usize, fft: &dyn Fft<f64>) {
        if len == 1 {
            return;
        }
        let mut buf = vec![Complex64::new(0.0, 0.0); outer * len * inner];
        for o in 0..outer {
            for i in 0..len {
                let src = &data[(o * len + i) * inner..(o * len + i + 1) * inner];
                for (j, &x) in src.iter().enumerate() {
                    buf[(o * inner + j) * len + i] = x;
                }
            }
        }
        let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
        fft.process_with_scratch(&mut buf, &mut scratch);
        for o in 0..outer {
            for i in 0..len {
                let dst = &mut data[(o * len + i) * inner..(o * len + i + 1) * inner];
                for (j, x) in dst.iter_mut().enumerate() {
                    *x = buf[(o * inner + j) * len + i];
                }
            }
        }
    }

    /// Signed frequency triple of half-spectrum index `m`.
    pub fn mode_freq(&self, m: usize) -> [i64; 3] {
        let g = self.grid;
        let kz = m % self.nzr;
        let ky = (m / self.nzr) % g.ny;
        let kx = m / (self.nzr * g.ny);
        [signed_freq(kx, g.nx), signed_freq(ky, g.ny), kz as i64]
    }

    /// Index triple of half-spectrum index `m`.
    pub fn mode_index(&self, m: usize) -> [usize; 3] {
        let g = self.grid;
        let kz = m % self.nzr;
        let ky = (m / self.nzr) % g.ny;
        let kx = m / (self.nzr * g.ny);
        [kx, ky, kz]
    }
}
