//! Reference solver for periodic small-strain elastic localization.
//!
//! Basic Lippmann–Schwinger fixed point with the isotropic Green operator of
//! a homogeneous reference medium:
//!
//! ```text
//! ε⁰ = ε̄,   ε̂ⁿ⁺¹(ξ) = ε̂ⁿ(ξ) − Γ̂⁰(ξ) : σ̂ⁿ(ξ)  (ξ ≠ 0),   ε̂ⁿ⁺¹(0) = ε̄
//! ```
//!
//! Frequencies are the plain DFT integers. On even grids the Nyquist
//! frequencies are not uniquely signed; there the block is replaced by
//! `(C⁰)⁻¹` so that those modes relax to zero stress.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::fft::{is_nyquist, Fft3};
use crate::field::{Field, Grid, StiffnessField};
use crate::mandel::{PhaseParams, SymTensor2, SymTensor4};

/// Isotropic reference medium `(λ⁰, μ⁰)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceMedium {
    pub lambda: f64,
    pub mu: f64,
}

impl ReferenceMedium {
    /// Midpoint of the Lamé constants found in an isotropic stiffness field.
    pub fn midpoint(c: &StiffnessField) -> Self {
        let (mut lmin, mut lmax) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut mmin, mut mmax) = (f64::INFINITY, f64::NEG_INFINITY);
        for m in c.voxels() {
            let lambda = m.0[0][1];
            let mu = 0.5 * m.0[5][5];
            lmin = lmin.min(lambda);
            lmax = lmax.max(lambda);
            mmin = mmin.min(mu);
            mmax = mmax.max(mu);
        }
        Self {
            lambda: 0.5 * (lmin + lmax),
            mu: 0.5 * (mmin + mmax),
        }
    }

    pub fn midpoint_of_phases(p: &PhaseParams) -> Result<Self> {
        let (l1, m1) = crate::mandel::lame(p.e1, p.nu1)?;
        let (l2, m2) = crate::mandel::lame(p.e2(), p.nu2)?;
        Ok(Self {
            lambda: 0.5 * (l1 + l2),
            mu: 0.5 * (m1 + m2),
        })
    }

    pub fn stiffness(&self) -> SymTensor4 {
        SymTensor4::isotropic_lame(self.lambda, self.mu)
    }
}

/// Wave vector of a half-spectrum mode on a grid of cubic voxels.
fn wave_vector(plan: &Fft3, m: usize) -> [f64; 3] {
    let g = plan.grid();
    let h = g.nx.max(g.ny).max(g.nz) as f64;
    let k = plan.mode_freq(m);
    let dims = g.dims();
    std::array::from_fn(|a| 2.0 * std::f64::consts::PI * k[a] as f64 * h / dims[a] as f64)
}

/// Isotropic strain Green operator for unit direction `n`.
pub fn green_block(reference: &ReferenceMedium, n: [f64; 3]) -> SymTensor4 {
    let (l0, m0) = (reference.lambda, reference.mu);
    let d = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
    let c2 = (l0 + m0) / (m0 * (l0 + 2.0 * m0));
    let mut t = [[[[0.0; 3]; 3]; 3]; 3];
    for k in 0..3 {
        for h in 0..3 {
            for i in 0..3 {
                for j in 0..3 {
                    t[k][h][i][j] = (d(k, i) * n[h] * n[j] + d(h, i) * n[k] * n[j] + d(k, j) * n[h] * n[i] + d(h, j) * n[k] * n[i])
                        / (4.0 * m0)
                        - c2 * n[i] * n[j] * n[k] * n[h];
                }
            }
        }
    }
    SymTensor4::from_tensor(&t).expect("green operator is minor symmetric by construction")
}

/// Spectral Green operator Γ⁰ on the half spectrum of a grid.
#[derive(Debug, Clone)]
pub struct GreenOperator {
    grid: Grid,
    reference: ReferenceMedium,
    blocks: Vec<SymTensor4>,
}

impl GreenOperator {
    pub fn new(grid: Grid, reference: ReferenceMedium) -> Result<Self> {
        ensure!(
            reference.mu > 0.0 && reference.lambda + 2.0 * reference.mu > 0.0,
            InvalidArgument,
            "reference medium must be positive definite"
        );
        let plan = Fft3::for_grid(grid);
        let compliance = reference.stiffness().inverse()?;
        let dims = grid.dims();
        let blocks = (0..plan.half_len())
            .map(|m| {
                let idx = plan.mode_index(m);
                if m == 0 {
                    SymTensor4::default()
                } else if (0..3).any(|a| is_nyquist(idx[a], dims[a])) {
                    compliance
                } else {
                    let xi = wave_vector(&plan, m);
                    let r = xi.iter().map(|x| x * x).sum::<f64>().sqrt();
                    green_block(&reference, xi.map(|x| x / r))
                }
            })
            .collect();
        Ok(Self {
            grid,
            reference,
            blocks,
        })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn reference(&self) -> ReferenceMedium {
        self.reference
    }

    pub fn block(&self, mode: usize) -> &SymTensor4 {
        &self.blocks[mode]
    }

    pub fn blocks(&self) -> &[SymTensor4] {
        &self.blocks
    }

    fn apply_spectrum(&self, spec: &mut [Vec<Complex64>]) {
        let mut v = [Complex64::new(0.0, 0.0); 6];
        for (m, g) in self.blocks.iter().enumerate() {
            for c in 0..6 {
                v[c] = spec[c][m];
            }
            for (r, row) in g.0.iter().enumerate() {
                spec[r][m] = row.iter().zip(&v).map(|(a, x)| x * *a).sum();
            }
        }
    }

    /// `Γ⁰ * τ`; the result has zero mean.
    pub fn apply(&self, tau: &Field) -> Result<Field> {
        ensure!(tau.channels() == 6, Shape, "polarization needs 6 channels");
        ensure!(tau.grid() == self.grid, Shape, "field grid {} vs operator grid {}", tau.grid(), self.grid);
        let plan = Fft3::for_grid(self.grid);
        let mut spec: Vec<Vec<Complex64>> = (0..6).map(|c| plan.forward_vec(tau.channel(c))).collect();
        self.apply_spectrum(&mut spec);
        let mut out = Field::zeros(6, self.grid);
        for (c, s) in spec.iter_mut().enumerate() {
            plan.inverse(s, out.channel_mut(c));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iters: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    /// Number of equilibrium checks performed (one per iterate).
    pub iterations: usize,
    pub residuals: Vec<f64>,
    pub converged: bool,
    /// `⟨σ⟩₁₁ / ε̄₁₁`, when the loading has an x-x component.
    pub c_eff: Option<f64>,
}

/// `‖ξ·σ̂‖` over nonzero frequencies divided by `‖σ̂(0)‖`.
pub fn equilibrium_residual(stress_spec: &[Vec<Complex64>], grid: Grid) -> f64 {
    let plan = Fft3::for_grid(grid);
    let s2 = std::f64::consts::FRAC_1_SQRT_2;
    let mut num = 0.0;
    for m in 1..plan.half_len() {
        let xi = wave_vector(&plan, m);
        let s = |c: usize| stress_spec[c][m];
        // rows of σ from Mandel components
        let rows = [
            [s(0), s(5) * s2, s(4) * s2],
            [s(5) * s2, s(1), s(3) * s2],
            [s(4) * s2, s(3) * s2, s(2)],
        ];
        let w = crate::fft::half_plane_weight(plan.mode_index(m)[2], grid.nz);
        for row in &rows {
            let div: Complex64 = row.iter().zip(&xi).map(|(a, x)| a * *x).sum();
            num += w * div.norm_sqr();
        }
    }
    let den: f64 = (0..6).map(|c| stress_spec[c][0].norm_sqr()).sum::<f64>().sqrt();
    num.sqrt() / den.max(f64::MIN_POSITIVE)
}

/// Solve for the periodic strain field with mean `eps_bar`. On
/// non-convergence the last iterate is returned with `converged = false`.
pub fn ls_solve(c: &StiffnessField, eps_bar: &SymTensor2, opts: &SolveOptions) -> Result<(Field, SolveReport)> {
    let reference = ReferenceMedium::midpoint(c);
    let green = GreenOperator::new(c.grid(), reference)?;
    ls_solve_with(c, eps_bar, &green, opts)
}

pub fn ls_solve_with(c: &StiffnessField, eps_bar: &SymTensor2, green: &GreenOperator, opts: &SolveOptions) -> Result<(Field, SolveReport)> {
    let grid = c.grid();
    ensure!(grid == green.grid(), Shape, "stiffness grid {} vs operator grid {}", grid, green.grid());
    ensure!(opts.max_iters >= 1, InvalidArgument, "max_iters must be at least 1");
    let plan = Fft3::for_grid(grid);
    let n = grid.voxels() as f64;
    let mut eps = Field::constant_tensor(eps_bar, grid);
    let mut eps_spec: Vec<Vec<Complex64>> = (0..6).map(|ch| plan.forward_vec(eps.channel(ch))).collect();
    let mut residuals = Vec::new();
    let mut converged = false;
    let mut stress = Field::zeros(6, grid);
    let mut scratch = vec![Complex64::new(0.0, 0.0); plan.half_len()];
    for it in 0..opts.max_iters {
        if it > 0 {
            for ch in 0..6 {
                scratch.copy_from_slice(&eps_spec[ch]);
                plan.inverse(&mut scratch, eps.channel_mut(ch));
            }
        }
        for v in 0..grid.voxels() {
            stress.set_tensor(v, &c.at(v).apply(&eps.tensor_at(v)));
        }
        let mut spec: Vec<Vec<Complex64>> = (0..6).map(|ch| plan.forward_vec(stress.channel(ch))).collect();
        let r = equilibrium_residual(&spec, grid);
        ensure!(r.is_finite(), Numerical, "non-finite equilibrium residual at iteration {it}");
        residuals.push(r);
        if r < opts.tol {
            converged = true;
            break;
        }
        if it + 1 == opts.max_iters {
            break;
        }
        green.apply_spectrum(&mut spec);
        for ch in 0..6 {
            for (e, s) in eps_spec[ch].iter_mut().zip(&spec[ch]) {
                *e -= s;
            }
            eps_spec[ch][0] = Complex64::new(eps_bar.0[ch] * n, 0.0);
        }
    }
    let c_eff = homogenize(c, &eps).ok();
    Ok((
        eps,
        SolveReport {
            iterations: residuals.len(),
            residuals,
            converged,
            c_eff,
        },
    ))
}

/// Effective x-x stiffness `⟨C:ε⟩₁₁ / ⟨ε⟩₁₁`.
pub fn homogenize(c: &StiffnessField, eps: &Field) -> Result<f64> {
    ensure!(c.grid() == eps.grid(), Shape, "stiffness grid {} vs strain grid {}", c.grid(), eps.grid());
    let mean11 = eps.channel_means()[0];
    ensure!(mean11.abs() > 0.0, InvalidArgument, "average x-x strain is zero");
    let s11: f64 = (0..eps.voxels()).map(|v| c.at(v).apply(&eps.tensor_at(v)).0[0]).sum::<f64>() / eps.voxels() as f64;
    Ok(s11 / mean11)
}

/// Arithmetic and harmonic means of the P-wave modulus `C₁₁₁₁` over voxels.
pub fn voigt_reuss_bounds(c: &StiffnessField) -> (f64, f64) {
    let n = c.voxels().len() as f64;
    let voigt = c.voxels().iter().map(|m| m.0[0][0]).sum::<f64>() / n;
    let reuss = n / c.voxels().iter().map(|m| 1.0 / m.0[0][0]).sum::<f64>();
    (voigt, reuss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mandel::isotropic_stiffness;
    use crate::microgen::Microstructure;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn reference() -> ReferenceMedium {
        ReferenceMedium::midpoint_of_phases(&PhaseParams::with_contrast(10.0)).unwrap()
    }

    #[test]
    fn zero_frequency_block_is_null_and_blocks_are_psd() {
        let green = GreenOperator::new(Grid::cubic(6), reference()).unwrap();
        assert_eq!(green.block(0), &SymTensor4::default());
        for b in &green.blocks()[1..] {
            assert!(b.is_symmetric(1e-14));
            assert!(b.min_eigenvalue() > -1e-14);
        }
    }

    #[test]
    fn constant_polarization_maps_to_zero_and_mean_vanishes() {
        let g = Grid::cubic(6);
        let green = GreenOperator::new(g, reference()).unwrap();
        let tau = Field::constant_tensor(&SymTensor2([1.0, -2.0, 0.5, 0.3, 0.2, 0.1]), g);
        assert!(green.apply(&tau).unwrap().norm() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tau = Field::from_vec(6, g, (0..6 * g.voxels()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let out = green.apply(&tau).unwrap();
        assert!(out.channel_means().iter().all(|m| m.abs() < 1e-12));
        assert!(green.apply(&Field::zeros(6, Grid::cubic(4))).is_err());
    }

    #[test]
    fn single_frequency_matches_direct_block() {
        let g = Grid::cubic(8);
        let r = reference();
        let green = GreenOperator::new(g, r).unwrap();
        // τ(x) = a cos(2π k·x / N) with k = (1, 2, 0)
        let a = SymTensor2([0.7, -0.2, 0.4, 1.1, -0.5, 0.3]);
        let k = [1.0, 2.0, 0.0];
        let mut tau = Field::zeros(6, g);
        for x in 0..g.nx {
            for y in 0..g.ny {
                for z in 0..g.nz {
                    let ph = 2.0 * std::f64::consts::PI * (k[0] * x as f64 + k[1] * y as f64) / 8.0;
                    tau.set_tensor(g.index(x, y, z), &a.scaled(ph.cos()));
                }
            }
        }
        let out = green.apply(&tau).unwrap();
        let norm = (k[0] * k[0] + k[1] * k[1]).sqrt();
        let direct = green_block(&r, [k[0] / norm, k[1] / norm, 0.0]).apply(&a);
        for x in 0..g.nx {
            for y in 0..g.ny {
                let ph = 2.0 * std::f64::consts::PI * (k[0] * x as f64 + k[1] * y as f64) / 8.0;
                let got = out.tensor_at(g.index(x, y, 3));
                for c in 0..6 {
                    assert!((got.0[c] - direct.0[c] * ph.cos()).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn homogeneous_medium_is_exact_in_one_iteration() {
        let g = Grid::cubic(8);
        let c = StiffnessField::uniform(isotropic_stiffness(120.0, 0.3).unwrap(), g);
        let eps_bar = SymTensor2([0.001, 0.0002, -0.0003, 0.0, 0.0001, 0.0]);
        let (eps, rep) = ls_solve(&c, &eps_bar, &SolveOptions::default()).unwrap();
        assert!(rep.converged);
        assert_eq!(rep.iterations, 1);
        assert!(rep.residuals[0] < 1e-14);
        for v in 0..g.voxels() {
            for k in 0..6 {
                assert!((eps.tensor_at(v).0[k] - eps_bar.0[k]).abs() < 1e-12);
            }
        }
        let c11 = c.at(0).0[0][0];
        let (eps, _) = ls_solve(&c, &SymTensor2::uniaxial_xx(0.002), &SolveOptions::default()).unwrap();
        assert!((homogenize(&c, &eps).unwrap() - c11).abs() < 1e-9);
    }

    fn laminate_value(p: &PhaseParams, f_hard: f64) -> f64 {
        let m1 = p.soft().unwrap().0[0][0];
        let m2 = p.hard().unwrap().0[0][0];
        1.0 / ((1.0 - f_hard) / m1 + f_hard / m2)
    }

    #[test]
    fn laminate_matches_harmonic_mean() {
        let p = PhaseParams::with_contrast(10.0);
        let expected = laminate_value(&p, 0.5);
        assert!((expected - 293.706).abs() < 1e-3);
        let opts = SolveOptions {
            tol: 1e-9,
            max_iters: 5000,
        };
        let mut values = Vec::new();
        for n in [16, 32] {
            let ms = Microstructure::laminate_x(Grid::new(n, 4, 4), n / 2, p);
            let c = ms.to_stiffness().unwrap();
            let (eps, rep) = ls_solve(&c, &SymTensor2::uniaxial_xx(0.001), &opts).unwrap();
            assert!(rep.converged);
            let ceff = homogenize(&c, &eps).unwrap();
            assert!((ceff - expected).abs() / expected < 1e-6, "{ceff} vs {expected}");
            values.push(ceff);
            assert!(eps.channel_means()[0] - 0.001 < 1e-15);
        }
        assert!((values[0] - values[1]).abs() / values[0] < 1e-8);
    }

    #[test]
    fn translation_equivariance() {
        let g = Grid::cubic(8);
        let gen = crate::microgen::GenParams {
            feature_sizes: [1.5, 2.0, 2.5],
            volume_fraction: 0.5,
        };
        let ms = crate::microgen::grf_microstructure(&gen, g, PhaseParams::with_contrast(10.0), 2).unwrap();
        let c = ms.to_stiffness().unwrap();
        let shift = [2, -3, 1];
        let opts = SolveOptions {
            tol: 1e-10,
            max_iters: 2000,
        };
        let eps_bar = SymTensor2::uniaxial_xx(1.0);
        let (a, _) = ls_solve(&c, &eps_bar, &opts).unwrap();
        let (b, _) = ls_solve(&c.roll(shift), &eps_bar, &opts).unwrap();
        assert!(a.roll(shift).max_abs_diff(&b) < 1e-9);
    }
}
