//! Synthetic periodic two-phase microstructures from thresholded Gaussian
//! random fields.
//!
//! White noise is smoothed by an anisotropic Gaussian filter applied in
//! Fourier space (so the result is exactly periodic), then cut at the
//! empirical quantile that gives the requested hard-phase volume fraction.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::fft::{signed_freq, Fft3};
use crate::field::{Grid, StiffnessField};
use crate::mandel::{PhaseParams, SymTensor2};

/// Per-sample RNG seed derived from a run seed and a sample index.
pub fn stream_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_for(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, index))
}

/// Latin hypercube design: `n` points in the box `ranges`, one point per
/// equal-width stratum along every axis.
pub fn lhs_sample(n: usize, ranges: &[(f64, f64)], seed: u64) -> Result<Vec<Vec<f64>>> {
    ensure!(n >= 1, InvalidArgument, "need at least one sample");
    for &(lo, hi) in ranges {
        ensure!(hi > lo, InvalidArgument, "degenerate range [{lo}, {hi}]");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = vec![vec![0.0; ranges.len()]; n];
    for (d, &(lo, hi)) in ranges.iter().enumerate() {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(&mut rng);
        let width = (hi - lo) / n as f64;
        for (p, &s) in points.iter_mut().zip(&strata) {
            let u: f64 = rng.random();
            p[d] = lo + width * (s as f64 + u);
        }
    }
    Ok(points)
}

/// Design ranges for the random-field generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenRanges {
    /// Feature size (Gaussian standard deviation) range in voxels.
    pub feature_size: (f64, f64),
    pub volume_fraction: (f64, f64),
    /// Draw a single feature size for all three axes.
    pub isotropic: bool,
}

impl GenRanges {
    /// `l ∈ [2, N/4]` voxels and `vf ∈ [0.3, 0.7]`.
    pub fn default_for(grid: Grid) -> Self {
        let n = grid.nx.min(grid.ny).min(grid.nz) as f64;
        Self {
            feature_size: (2.0, (n / 4.0).max(2.5)),
            volume_fraction: (0.3, 0.7),
            isotropic: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub feature_sizes: [f64; 3],
    pub volume_fraction: f64,
}

pub fn sample_gen_params(n: usize, ranges: &GenRanges, seed: u64) -> Result<Vec<GenParams>> {
    let axes = if ranges.isotropic { 1 } else { 3 };
    let mut boxes = vec![ranges.feature_size; axes];
    boxes.push(ranges.volume_fraction);
    Ok(lhs_sample(n, &boxes, seed)?
        .into_iter()
        .map(|p| {
            let l = if ranges.isotropic { [p[0]; 3] } else { [p[0], p[1], p[2]] };
            GenParams {
                feature_sizes: l,
                volume_fraction: p[axes],
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Microstructure {
    pub grid: Grid,
    /// 0 = soft phase, 1 = hard phase, C order.
    pub phase: Vec<u8>,
    pub params: PhaseParams,
    pub gen: GenParams,
    pub seed: u64,
}

impl Microstructure {
    pub fn volume_fraction(&self) -> f64 {
        self.phase.iter().filter(|&&p| p == 1).count() as f64 / self.phase.len() as f64
    }

    /// Laminate with layers normal to x: voxels with `x < hard_from` are soft.
    pub fn laminate_x(grid: Grid, hard_from: usize, params: PhaseParams) -> Self {
        let mut phase = vec![0u8; grid.voxels()];
        for x in hard_from..grid.nx {
            for y in 0..grid.ny {
                for z in 0..grid.nz {
                    phase[grid.index(x, y, z)] = 1;
                }
            }
        }
        let vf = (grid.nx - hard_from) as f64 / grid.nx as f64;
        Self {
            grid,
            phase,
            params,
            gen: GenParams {
                feature_sizes: [0.0; 3],
                volume_fraction: vf,
            },
            seed: 0,
        }
    }

    pub fn with_contrast(&self, kappa: f64) -> Self {
        let mut m = self.clone();
        m.params.kappa = kappa;
        m
    }

    pub fn to_stiffness(&self) -> Result<StiffnessField> {
        let soft = self.params.soft()?;
        let hard = self.params.hard()?;
        StiffnessField::from_vec(
            self.grid,
            self.phase.iter().map(|&p| if p == 0 { soft } else { hard }).collect(),
        )
    }
}

pub fn white_noise(grid: Grid, rng: &mut impl Rng) -> Vec<f64> {
    (0..grid.voxels()).map(|_| rng.sample(StandardNormal)).collect()
}

/// Periodic Gaussian smoothing with per-axis standard deviations in voxels.
pub fn gaussian_filter(noise: &[f64], grid: Grid, sigma: [f64; 3]) -> Vec<f64> {
    let plan = Fft3::for_grid(grid);
    let mut spec = plan.forward_vec(noise);
    let dims = grid.dims();
    let two_pi2 = 2.0 * std::f64::consts::PI * std::f64::consts::PI;
    for (m, c) in spec.iter_mut().enumerate() {
        let idx = plan.mode_index(m);
        let mut e = 0.0;
        for a in 0..3 {
            let f = signed_freq(idx[a], dims[a]) as f64 / dims[a] as f64;
            e += (sigma[a] * f).powi(2);
        }
        *c *= (-two_pi2 * e).exp();
    }
    plan.inverse_vec(spec)
}

/// Phase 1 on the `round(vf·N)` largest values of `field`.
pub fn threshold(field: &[f64], volume_fraction: f64) -> Vec<u8> {
    let n = field.len();
    let hard = ((volume_fraction * n as f64).round() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| field[b].total_cmp(&field[a]).then(a.cmp(&b)));
    let mut phase = vec![0u8; n];
    for &i in &order[..hard] {
        phase[i] = 1;
    }
    phase
}

fn check_gen(gen: &GenParams, grid: Grid) -> Result<()> {
    ensure!(
        grid.nx >= 4 && grid.ny >= 4 && grid.nz >= 4,
        InvalidArgument,
        "grid {grid} is too small; need at least 4 voxels per axis"
    );
    for (a, (&l, n)) in gen.feature_sizes.iter().zip(grid.dims()).enumerate() {
        ensure!(
            l >= 1.0 && l <= n as f64 / 2.0,
            InvalidArgument,
            "feature size {l} on axis {a} outside [1, {}]",
            n as f64 / 2.0
        );
    }
    ensure!(
        gen.volume_fraction > 0.0 && gen.volume_fraction < 1.0,
        InvalidArgument,
        "volume fraction {} outside (0, 1)",
        gen.volume_fraction
    );
    Ok(())
}

/// Threshold an already-drawn noise field. Exposed so that translation
/// equivariance can be checked against shifted noise.
pub fn microstructure_from_noise(noise: &[f64], gen: &GenParams, grid: Grid, params: PhaseParams, seed: u64) -> Result<Microstructure> {
    check_gen(gen, grid)?;
    params.validate()?;
    ensure!(noise.len() == grid.voxels(), Shape, "noise has {} values for grid {grid}", noise.len());
    let smooth = gaussian_filter(noise, grid, gen.feature_sizes);
    Ok(Microstructure {
        grid,
        phase: threshold(&smooth, gen.volume_fraction),
        params,
        gen: *gen,
        seed,
    })
}

pub fn grf_microstructure(gen: &GenParams, grid: Grid, params: PhaseParams, seed: u64) -> Result<Microstructure> {
    check_gen(gen, grid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = white_noise(grid, &mut rng);
    microstructure_from_noise(&noise, gen, grid, params, seed)
}

/// Direction uniform on the unit 6-sphere, scaled to `magnitude`.
pub fn random_loading(rng: &mut impl Rng, magnitude: f64) -> SymTensor2 {
    loop {
        let v: [f64; 6] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            return SymTensor2(v.map(|x| x * magnitude / n));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> PhaseParams {
        PhaseParams::with_contrast(100.0)
    }

    #[test]
    fn lhs_strata_and_determinism() {
        let pts = lhs_sample(4, &[(0.0, 1.0)], 11).unwrap();
        let mut q: Vec<usize> = pts.iter().map(|p| (p[0] * 4.0).floor() as usize).collect();
        q.sort();
        assert_eq!(q, vec![0, 1, 2, 3]);
        assert_eq!(pts, lhs_sample(4, &[(0.0, 1.0)], 11).unwrap());

        let pts = lhs_sample(100, &[(0.3, 0.7), (2.0, 4.0)], 5).unwrap();
        for d in 0..2 {
            let (lo, hi) = [(0.3, 0.7), (2.0, 4.0)][d];
            let mut hist = vec![0; 100];
            for p in &pts {
                assert!(p[d] >= lo && p[d] <= hi);
                hist[(((p[d] - lo) / (hi - lo) * 100.0).floor() as usize).min(99)] += 1;
            }
            assert!(hist.iter().all(|&h| h == 1));
        }
        assert!(lhs_sample(3, &[(1.0, 1.0)], 0).is_err());
    }

    #[test]
    fn volume_fraction_is_quantile_exact() {
        let g = Grid::cubic(16);
        let gen = GenParams {
            feature_sizes: [2.5; 3],
            volume_fraction: 0.5,
        };
        let ms = grf_microstructure(&gen, g, params(), 3).unwrap();
        assert!((ms.volume_fraction() - 0.5).abs() <= 2.0 / g.voxels() as f64);
        assert!(ms.phase.iter().all(|&p| p <= 1));
    }

    #[test]
    fn seeds_are_deterministic_and_distinct() {
        let g = Grid::cubic(8);
        let gen = GenParams {
            feature_sizes: [2.0; 3],
            volume_fraction: 0.4,
        };
        let a = grf_microstructure(&gen, g, params(), 1).unwrap();
        let b = grf_microstructure(&gen, g, params(), 1).unwrap();
        let c = grf_microstructure(&gen, g, params(), 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.phase, c.phase);
    }

    #[test]
    fn anisotropic_features_correlate_longer_along_x() {
        let g = Grid::cubic(16);
        let gen = GenParams {
            feature_sizes: [6.0, 1.0, 1.0],
            volume_fraction: 0.5,
        };
        let mut corr_x = 0.0;
        let mut corr_y = 0.0;
        for seed in 0..4 {
            let ms = grf_microstructure(&gen, g, params(), seed).unwrap();
            let f: Vec<f64> = ms.phase.iter().map(|&p| p as f64 - 0.5).collect();
            // autocorrelation via |F|² then inverse transform
            let plan = Fft3::for_grid(g);
            let spec: Vec<_> = plan.forward_vec(&f).iter().map(|c| c * c.conj()).collect();
            let ac = plan.inverse_vec(spec);
            corr_x += ac[g.index(3, 0, 0)] / ac[0];
            corr_y += ac[g.index(0, 3, 0)] / ac[0];
        }
        assert!(corr_x > corr_y + 0.2, "x {corr_x} y {corr_y}");
    }

    #[test]
    fn shifted_noise_shifts_structure() {
        let g = Grid::cubic(8);
        let gen = GenParams {
            feature_sizes: [2.0, 1.5, 3.0],
            volume_fraction: 0.45,
        };
        let mut rng = rng_for(4, 0);
        let noise = white_noise(g, &mut rng);
        let shift = [3i64, -1, 5];
        let mut shifted = vec![0.0; noise.len()];
        for x in 0..g.nx {
            for y in 0..g.ny {
                for z in 0..g.nz {
                    shifted[g.shifted(x, y, z, shift)] = noise[g.index(x, y, z)];
                }
            }
        }
        let a = microstructure_from_noise(&noise, &gen, g, params(), 0).unwrap();
        let b = microstructure_from_noise(&shifted, &gen, g, params(), 0).unwrap();
        for x in 0..g.nx {
            for y in 0..g.ny {
                for z in 0..g.nz {
                    assert_eq!(b.phase[g.shifted(x, y, z, shift)], a.phase[g.index(x, y, z)]);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let gen = GenParams {
            feature_sizes: [2.0; 3],
            volume_fraction: 0.5,
        };
        assert!(grf_microstructure(&gen, Grid::cubic(3), params(), 0).is_err());
        let big = GenParams {
            feature_sizes: [9.0, 2.0, 2.0],
            volume_fraction: 0.5,
        };
        assert!(grf_microstructure(&big, Grid::cubic(16), params(), 0).is_err());
    }

    #[test]
    fn stiffness_mapping() {
        let g = Grid::cubic(8);
        let gen = GenParams {
            feature_sizes: [2.0; 3],
            volume_fraction: 0.5,
        };
        let ms = grf_microstructure(&gen, g, params(), 9).unwrap();
        let c = ms.to_stiffness().unwrap();
        let hard = ms.phase.iter().position(|&p| p == 1).unwrap();
        assert!((c.at(hard).0[0][0] - 16_153.846_153_846_15).abs() < 1e-6);
        assert!(c.voxels().iter().all(|m| m.min_eigenvalue() > 0.0));
        let uniform = ms.with_contrast(1.0).to_stiffness().unwrap();
        assert!(uniform.voxels().iter().all(|m| m == uniform.at(0)));
    }

    #[test]
    fn mean_volume_fraction_calibrated() {
        let g = Grid::cubic(8);
        let gens = sample_gen_params(200, &GenRanges { volume_fraction: (0.5, 0.5 + 1e-9), ..GenRanges::default_for(Grid::cubic(16)) }, 1).unwrap();
        let mut total = 0.0;
        for (i, gen) in gens.iter().enumerate() {
            let mut gen = *gen;
            gen.feature_sizes = gen.feature_sizes.map(|l| l.min(4.0));
            total += grf_microstructure(&gen, g, params(), stream_seed(7, i as u64)).unwrap().volume_fraction();
        }
        assert!((total / 200.0 - 0.5).abs() < 0.01);
    }

    #[test]
    fn loading_on_sphere() {
        let mut rng = rng_for(1, 2);
        for _ in 0..100 {
            assert!((random_loading(&mut rng, 0.001).norm() - 0.001).abs() < 1e-12);
        }
    }
}
