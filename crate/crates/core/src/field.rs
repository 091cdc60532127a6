//! Periodic voxel fields.
//!
//! A [`Field`] stores `channels` scalar grids back to back in C order, i.e.
//! the flat index of `(c, x, y, z)` is `((c * nx + x) * ny + y) * nz + z`.
//! All grids are periodic in every axis.

use crate::error::{ensure, Result};
use crate::mandel::{SymTensor2, SymTensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Grid {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Grid {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Self { nx, ny, nz }
    }

    pub fn cubic(n: usize) -> Self {
        Self::new(n, n, n)
    }

    pub fn voxels(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.ny + y) * self.nz + z
    }

    /// Number of complex modes in the real-FFT half spectrum.
    pub fn half_modes(&self) -> usize {
        self.nx * self.ny * (self.nz / 2 + 1)
    }

    /// Flat index of the voxel obtained by circularly shifting `(x, y, z)`.
    pub fn shifted(&self, x: usize, y: usize, z: usize, shift: [i64; 3]) -> usize {
        let wrap = |i: usize, s: i64, n: usize| (i as i64 + s).rem_euclid(n as i64) as usize;
        self.index(
            wrap(x, shift[0], self.nx),
            wrap(y, shift[1], self.ny),
            wrap(z, shift[2], self.nz),
        )
    }
}

impl std::fmt::Display for Grid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.nx, self.ny, self.nz)
    }
}

/// A multi-channel periodic voxel field of shape `[channels, nx, ny, nz]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: Grid,
    channels: usize,
    data: Vec<f64>,
}

impl Field {
    pub fn zeros(channels: usize, grid: Grid) -> Self {
        Self {
            grid,
            channels,
            data: vec![0.0; channels * grid.voxels()],
        }
    }

    pub fn from_vec(channels: usize, grid: Grid, data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.len() == channels * grid.voxels(),
            Shape,
            "{} values cannot fill {} channels on a {} grid",
            data.len(),
            channels,
            grid
        );
        Ok(Self {
            grid,
            channels,
            data,
        })
    }

    /// Constant symmetric-tensor field.
    pub fn constant_tensor(t: &SymTensor2, grid: Grid) -> Self {
        let mut f = Self::zeros(6, grid);
        for c in 0..6 {
            f.channel_mut(c).fill(t.0[c]);
        }
        f
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn voxels(&self) -> usize {
        self.grid.voxels()
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

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, v: usize) -> f64 {
        self.data[c * self.grid.voxels() + v]
    }

    /// Symmetric tensor stored at voxel `v` of a six-channel field.
    #[inline]
    pub fn tensor_at(&self, v: usize) -> SymTensor2 {
        let n = self.grid.voxels();
        let d = &self.data;
        SymTensor2([d[v], d[n + v], d[2 * n + v], d[3 * n + v], d[4 * n + v], d[5 * n + v]])
    }

    #[inline]
    pub fn set_tensor(&mut self, v: usize, t: &SymTensor2) {
        let n = self.grid.voxels();
        for c in 0..6 {
            self.data[c * n + v] = t.0[c];
        }
    }

    pub fn channel_means(&self) -> Vec<f64> {
        (0..self.channels)
            .map(|c| self.channel(c).iter().sum::<f64>() / self.voxels() as f64)
            .collect()
    }

    /// Volume average of a six-channel field as a tensor.
    pub fn mean_tensor(&self) -> SymTensor2 {
        let m = self.channel_means();
        let mut t = [0.0; 6];
        t.copy_from_slice(&m[..6]);
        SymTensor2(t)
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Circular shift: `out(i + shift) = self(i)` along every axis.
    pub fn roll(&self, shift: [i64; 3]) -> Field {
        let g = self.grid;
        let n = g.voxels();
        let mut out = Field::zeros(self.channels, g);
        for c in 0..self.channels {
            let src = &self.data[c * n..(c + 1) * n];
            let dst = &mut out.data[c * n..(c + 1) * n];
            for x in 0..g.nx {
                for y in 0..g.ny {
                    for z in 0..g.nz {
                        dst[g.shifted(x, y, z, shift)] = src[g.index(x, y, z)];
                    }
                }
            }
        }
        out
    }

    /// Stack fields along the channel axis.
    pub fn concat(parts: &[&Field]) -> Result<Field> {
        ensure!(!parts.is_empty(), InvalidArgument, "nothing to concatenate");
        let grid = parts[0].grid;
        ensure!(
            parts.iter().all(|p| p.grid == grid),
            Shape,
            "concatenated fields must share a grid"
        );
        let channels = parts.iter().map(|p| p.channels).sum();
        let mut data = Vec::with_capacity(channels * grid.voxels());
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Field {
            grid,
            channels,
            data,
        })
    }

    pub fn max_abs_diff(&self, other: &Field) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Per-voxel Mandel stiffness matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct StiffnessField {
    grid: Grid,
    data: Vec<SymTensor4>,
}

impl StiffnessField {
    pub fn uniform(c: SymTensor4, grid: Grid) -> Self {
        Self {
            grid,
            data: vec![c; grid.voxels()],
        }
    }

    pub fn from_vec(grid: Grid, data: Vec<SymTensor4>) -> Result<Self> {
        ensure!(
            data.len() == grid.voxels(),
            Shape,
            "{} stiffness entries for a {} grid",
            data.len(),
            grid
        );
        Ok(Self { grid, data })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn voxels(&self) -> &[SymTensor4] {
        &self.data
    }

    pub fn voxels_mut(&mut self) -> &mut [SymTensor4] {
        &mut self.data
    }

    pub fn at(&self, v: usize) -> &SymTensor4 {
        &self.data[v]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            grid: self.grid,
            data: self.data.iter().map(|c| c.scaled(factor)).collect(),
        }
    }

    pub fn roll(&self, shift: [i64; 3]) -> Self {
        let g = self.grid;
        let mut data = self.data.clone();
        for x in 0..g.nx {
            for y in 0..g.ny {
                for z in 0..g.nz {
                    data[g.shifted(x, y, z, shift)] = self.data[g.index(x, y, z)];
                }
            }
        }
        Self { grid: g, data }
    }

    /// The 21 upper-triangle Mandel entries per voxel as channels. Off-diagonal
    /// entries carry a factor √2 so the channel vector has the Frobenius norm of
    /// the matrix.
    pub fn flatten_upper(&self) -> Field {
        let n = self.grid.voxels();
        let mut out = Field::zeros(21, self.grid);
        let mut ch = 0;
        for i in 0..6 {
            for j in i..6 {
                let w = if i == j { 1.0 } else { std::f64::consts::SQRT_2 };
                let dst = out.channel_mut(ch);
                for v in 0..n {
                    dst[v] = w * self.data[v].0[i][j];
                }
                ch += 1;
            }
        }
        out
    }
}
