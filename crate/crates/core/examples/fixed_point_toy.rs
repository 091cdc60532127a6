//! Plain iteration versus Anderson mixing on a small affine map, and the
//! implicit gradient against its closed form.

use nalgebra::{DMatrix, DVector};
use therino::deq::{fixed_point_solve, ift_backward, AndersonConfig, FixedPointMap, Linearized, SolveMode};

/// `f(h) = A h + b(θ)` with `b = θ` (so `∂f/∂θ = I`).
struct Toy {
    a: DMatrix<f64>,
    theta: DVector<f64>,
}

impl FixedPointMap for Toy {
    fn apply(&self, h: &[f64]) -> therino::Result<Vec<f64>> {
        Ok((&self.a * DVector::from_column_slice(h) + &self.theta).iter().copied().collect())
    }
}

impl Linearized for Toy {
    fn vjp_state(&self, w: &[f64]) -> Vec<f64> {
        (self.a.transpose() * DVector::from_column_slice(w)).iter().copied().collect()
    }
    fn vjp_params(&self, w: &[f64], grads: &mut [f64]) {
        grads.iter_mut().zip(w).for_each(|(g, x)| *g += x);
    }
}

fn main() -> therino::Result<()> {
    let a = DMatrix::from_row_slice(4, 4, &[0.5, 0.3, 0.0, 0.1, -0.2, 0.6, 0.2, 0.0, 0.1, 0.0, 0.7, -0.3, 0.0, 0.2, 0.1, 0.4]);
    let toy = Toy {
        a,
        theta: DVector::from_column_slice(&[1.0, -0.5, 0.25, 2.0]),
    };
    let cfg = AndersonConfig::default();
    for mode in [SolveMode::Plain, SolveMode::Anderson] {
        let r = fixed_point_solve(&toy, vec![0.0; 4], 12, mode, &cfg, None)?;
        let trace: Vec<String> = r.residuals.iter().map(|x| format!("{x:.1e}")).collect();
        println!("{mode:?}: {}", trace.join(" "));
    }
    let g = [1.0, 0.0, 0.0, 0.0];
    let mut grads = vec![0.0; 4];
    let (_, rep) = ift_backward(&toy, &g, 1e-12, 100, &cfg, &mut grads)?;
    let id = DMatrix::<f64>::identity(4, 4);
    let exact = (id - &toy.a).transpose().lu().solve(&DVector::from_column_slice(&g)).expect("nonsingular");
    println!("implicit gradient {grads:.6?} after {} adjoint iterations", rep.iterations);
    println!("closed form       {:.6?}", exact.as_slice());
    Ok(())
}
