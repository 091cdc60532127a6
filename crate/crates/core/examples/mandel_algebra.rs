//! Mandel vectors, isotropic stiffness, equivalent measures and the
//! adimensional scale set.

use therino::mandel::{isotropic_stiffness, PhaseParams, ScaleSet, SymTensor2};

fn main() -> therino::Result<()> {
    let m = [[1.0e-3, 2.0e-4, 0.0], [2.0e-4, -3.0e-4, 1.0e-4], [0.0, 1.0e-4, 5.0e-4]];
    let eps = SymTensor2::from_matrix(&m)?;
    println!("mandel strain  {:?}", eps.0);
    println!("|eps| = {:.6e} (same as the Frobenius norm of the matrix)", eps.norm());

    let c = isotropic_stiffness(120.0, 0.3)?;
    let sigma = c.apply(&eps);
    println!("stress         {:?}", sigma.0);
    println!("energy density e:C:e = {:.6e}", eps.dot(&sigma));
    println!("von Mises stress {:.6e}, equivalent strain {:.6e}", sigma.equivalent_stress(), eps.equivalent_strain());

    let params = PhaseParams::with_contrast(10.0);
    let scales = ScaleSet::for_phases(&eps, &params)?;
    println!("strain scale {:.6e}, stiffness scale {:.6e}, stress scale {:.6e}", scales.strain_scale, scales.stiff_scale, scales.stress_scale());
    Ok(())
}
