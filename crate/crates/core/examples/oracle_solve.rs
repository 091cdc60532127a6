//! The FFT fixed-point oracle on a laminate (closed form known) and on a
//! random-field structure with its Voigt/Reuss bounds.

use therino::field::Grid;
use therino::mandel::{PhaseParams, SymTensor2};
use therino::microgen::{grf_microstructure, GenParams, Microstructure};
use therino::oracle::{homogenize, ls_solve, voigt_reuss_bounds, SolveOptions};

fn main() -> therino::Result<()> {
    let params = PhaseParams::with_contrast(10.0);
    let opts = SolveOptions { tol: 1e-9, max_iters: 5000 };
    let load = SymTensor2::uniaxial_xx(1e-3);

    let lam = Microstructure::laminate_x(Grid::new(16, 4, 4), 8, params).to_stiffness()?;
    let (eps, rep) = ls_solve(&lam, &load, &opts)?;
    let (m1, m2) = (params.soft()?.0[0][0], params.hard()?.0[0][0]);
    println!(
        "laminate: C1111 = {:.6} (harmonic mean {:.6}) after {} iterations",
        homogenize(&lam, &eps)?,
        2.0 / (1.0 / m1 + 1.0 / m2),
        rep.iterations
    );

    let gen = GenParams {
        feature_sizes: [2.0, 3.0, 2.5],
        volume_fraction: 0.5,
    };
    for kappa in [10.0, 100.0] {
        let ms = grf_microstructure(&gen, Grid::cubic(16), params, 3)?.with_contrast(kappa);
        let c = ms.to_stiffness()?;
        let (eps, rep) = ls_solve(&c, &load, &SolveOptions::default())?;
        let (voigt, reuss) = voigt_reuss_bounds(&c);
        println!(
            "random field, contrast {kappa}: C1111 = {:.3} in [{reuss:.3}, {voigt:.3}], {} iterations, final residual {:.2e}",
            homogenize(&c, &eps)?,
            rep.iterations,
            rep.residuals.last().copied().unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
