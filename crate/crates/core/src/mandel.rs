//! Symmetric tensor algebra in Mandel notation and the linear-elastic
//! constitutive law.
//!
//! Rank-2 tensors are stored as `(11, 22, 33, √2·23, √2·13, √2·12)`, rank-4
//! tensors as the matching 6×6 matrix. With this weighting the Euclidean
//! inner product of two vectors equals the double contraction of the
//! tensors, and matrix products equal rank-4 compositions.

use std::f64::consts::SQRT_2;

use nalgebra::{Matrix6, SymmetricEigen};

use crate::error::{ensure, Result};
use crate::field::{Field, StiffnessField};

/// `(i, j)` index pair for each Mandel slot.
pub const MANDEL_PAIRS: [(usize, usize); 6] = [(0, 0), (1, 1), (2, 2), (1, 2), (0, 2), (0, 1)];

const SYMMETRY_TOL: f64 = 1e-12;

#[inline]
fn weight(i: usize) -> f64 {
    if i < 3 {
        1.0
    } else {
        SQRT_2
    }
}

#[inline]
fn mandel_slot(i: usize, j: usize) -> usize {
    match (i.min(j), i.max(j)) {
        (0, 0) => 0,
        (1, 1) => 1,
        (2, 2) => 2,
        (1, 2) => 3,
        (0, 2) => 4,
        (0, 1) => 5,
        _ => unreachable!("index out of range"),
    }
}

/// Symmetric second-order tensor (strain, stress) in Mandel form.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SymTensor2(pub [f64; 6]);

impl SymTensor2 {
    pub const ZERO: SymTensor2 = SymTensor2([0.0; 6]);

    pub fn identity() -> Self {
        SymTensor2([1.0, 1.0, 1.0, 0.0, 0.0, 0.0])
    }

    /// Uniaxial tensor `s·e₁⊗e₁`.
    pub fn uniaxial_xx(s: f64) -> Self {
        SymTensor2([s, 0.0, 0.0, 0.0, 0.0, 0.0])
    }

    pub fn from_matrix(m: &[[f64; 3]; 3]) -> Result<Self> {
        let scale = m.iter().flatten().fold(1.0f64, |a, b| a.max(b.abs()));
        for i in 0..3 {
            for j in i + 1..3 {
                ensure!(
                    (m[i][j] - m[j][i]).abs() <= SYMMETRY_TOL * scale,
                    InvalidArgument,
                    "matrix is not symmetric at ({i},{j}): {} vs {}",
                    m[i][j],
                    m[j][i]
                );
            }
        }
        let mut v = [0.0; 6];
        for (s, &(i, j)) in MANDEL_PAIRS.iter().enumerate() {
            v[s] = weight(s) * m[i][j];
        }
        Ok(SymTensor2(v))
    }

    pub fn to_matrix(&self) -> [[f64; 3]; 3] {
        let mut m = [[0.0; 3]; 3];
        for (s, &(i, j)) in MANDEL_PAIRS.iter().enumerate() {
            let x = self.0[s] / weight(s);
            m[i][j] = x;
            m[j][i] = x;
        }
        m
    }

    #[inline]
    pub fn dot(&self, other: &SymTensor2) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn trace(&self) -> f64 {
        self.0[0] + self.0[1] + self.0[2]
    }

    pub fn scaled(&self, f: f64) -> Self {
        SymTensor2(self.0.map(|x| x * f))
    }

    /// Traceless part `τ − (1/3) tr(τ) I`.
    pub fn deviator(&self) -> Self {
        let p = self.trace() / 3.0;
        let mut v = self.0;
        for x in &mut v[..3] {
            *x -= p;
        }
        SymTensor2(v)
    }

    /// `√(3/2 σᵈ:σᵈ)`.
    pub fn equivalent_stress(&self) -> f64 {
        let d = self.deviator();
        (1.5 * d.dot(&d)).sqrt()
    }

    /// `√(2/3 εᵈ:εᵈ)`.
    pub fn equivalent_strain(&self) -> f64 {
        let d = self.deviator();
        (2.0 / 3.0 * d.dot(&d)).sqrt()
    }
}

/// Minor-symmetric fourth-order tensor as a 6×6 Mandel matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymTensor4(pub [[f64; 6]; 6]);

impl Default for SymTensor4 {
    fn default() -> Self {
        SymTensor4([[0.0; 6]; 6])
    }
}

impl SymTensor4 {
    pub fn identity() -> Self {
        let mut m = [[0.0; 6]; 6];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        SymTensor4(m)
    }

    /// Isotropic tensor `λ I⊗I + 2μ 𝕀ˢ` from Lamé constants.
    pub fn isotropic_lame(lambda: f64, mu: f64) -> Self {
        let mut m = [[0.0; 6]; 6];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = lambda;
            }
            m[i][i] += 2.0 * mu;
            m[i + 3][i + 3] = 2.0 * mu;
        }
        SymTensor4(m)
    }

    pub fn from_tensor(t: &[[[[f64; 3]; 3]; 3]; 3]) -> Result<Self> {
        let scale = t.iter().flatten().flatten().flatten().fold(1.0f64, |a, b| a.max(b.abs()));
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    for l in 0..3 {
                        let a = t[i][j][k][l];
                        ensure!(
                            (a - t[j][i][k][l]).abs() <= SYMMETRY_TOL * scale
                                && (a - t[i][j][l][k]).abs() <= SYMMETRY_TOL * scale,
                            InvalidArgument,
                            "tensor lacks minor symmetry at ({i},{j},{k},{l})"
                        );
                    }
                }
            }
        }
        let mut m = [[0.0; 6]; 6];
        for (s, &(i, j)) in MANDEL_PAIRS.iter().enumerate() {
            for (r, &(k, l)) in MANDEL_PAIRS.iter().enumerate() {
                m[s][r] = weight(s) * weight(r) * t[i][j][k][l];
            }
        }
        Ok(SymTensor4(m))
    }

    pub fn to_tensor(&self) -> [[[[f64; 3]; 3]; 3]; 3] {
        let mut t = [[[[0.0; 3]; 3]; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    for l in 0..3 {
                        let s = mandel_slot(i, j);
                        let r = mandel_slot(k, l);
                        t[i][j][k][l] = self.0[s][r] / (weight(s) * weight(r));
                    }
                }
            }
        }
        t
    }

    /// `C : ε`.
    #[inline]
    pub fn apply(&self, e: &SymTensor2) -> SymTensor2 {
        let mut out = [0.0; 6];
        for (o, row) in out.iter_mut().zip(&self.0) {
            *o = row.iter().zip(&e.0).map(|(c, x)| c * x).sum();
        }
        SymTensor2(out)
    }

    /// `A : B` (rank-4 composition).
    pub fn compose(&self, other: &SymTensor4) -> SymTensor4 {
        let mut m = [[0.0; 6]; 6];
        for i in 0..6 {
            for j in 0..6 {
                m[i][j] = (0..6).map(|k| self.0[i][k] * other.0[k][j]).sum();
            }
        }
        SymTensor4(m)
    }

    pub fn add(&self, other: &SymTensor4) -> SymTensor4 {
        let mut m = self.0;
        for i in 0..6 {
            for j in 0..6 {
                m[i][j] += other.0[i][j];
            }
        }
        SymTensor4(m)
    }

    pub fn scaled(&self, f: f64) -> SymTensor4 {
        SymTensor4(self.0.map(|r| r.map(|x| x * f)))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (0..6).all(|i| (0..6).all(|j| (self.0[i][j] - self.0[j][i]).abs() <= tol))
    }

    pub fn to_matrix6(&self) -> Matrix6<f64> {
        Matrix6::from_fn(|i, j| self.0[i][j])
    }

    /// Smallest eigenvalue of the symmetric part.
    pub fn min_eigenvalue(&self) -> f64 {
        let m = self.to_matrix6();
        let sym = (m + m.transpose()) * 0.5;
        SymmetricEigen::new(sym).eigenvalues.min()
    }

    pub fn inverse(&self) -> Result<SymTensor4> {
        let inv = self
            .to_matrix6()
            .try_inverse()
            .ok_or_else(|| crate::Error::Numerical("singular rank-4 tensor".into()))?;
        let mut m = [[0.0; 6]; 6];
        for i in 0..6 {
            for j in 0..6 {
                m[i][j] = inv[(i, j)];
            }
        }
        Ok(SymTensor4(m))
    }
}

/// Lamé constants `(λ, μ)` from Young's modulus and Poisson ratio.
pub fn lame(e: f64, nu: f64) -> Result<(f64, f64)> {
    ensure!(e > 0.0 && e.is_finite(), InvalidArgument, "Young's modulus must be positive, got {e}");
    ensure!(
        nu > -1.0 && nu < 0.5,
        InvalidArgument,
        "Poisson ratio must lie in (-1, 0.5), got {nu}"
    );
    let lambda = e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu));
    let mu = e / (2.0 * (1.0 + nu));
    Ok((lambda, mu))
}

pub fn isotropic_stiffness(e: f64, nu: f64) -> Result<SymTensor4> {
    let (lambda, mu) = lame(e, nu)?;
    Ok(SymTensor4::isotropic_lame(lambda, mu))
}

/// Elastic parameters of a two-phase composite. The hard phase has
/// Young's modulus `kappa * e1`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PhaseParams {
    pub e1: f64,
    pub nu1: f64,
    pub nu2: f64,
    pub kappa: f64,
}

impl PhaseParams {
    pub fn new(e1: f64, nu1: f64, nu2: f64, kappa: f64) -> Result<Self> {
        let p = Self { e1, nu1, nu2, kappa };
        p.validate()?;
        Ok(p)
    }

    /// Soft phase E₁ = 120, ν = 0.3 with the given contrast.
    pub fn with_contrast(kappa: f64) -> Self {
        Self {
            e1: 120.0,
            nu1: 0.3,
            nu2: 0.3,
            kappa,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.kappa > 0.0, InvalidArgument, "contrast must be positive, got {}", self.kappa);
        lame(self.e1, self.nu1)?;
        lame(self.e1 * self.kappa, self.nu2)?;
        Ok(())
    }

    pub fn e2(&self) -> f64 {
        self.kappa * self.e1
    }

    pub fn soft(&self) -> Result<SymTensor4> {
        isotropic_stiffness(self.e1, self.nu1)
    }

    pub fn hard(&self) -> Result<SymTensor4> {
        isotropic_stiffness(self.e2(), self.nu2)
    }

    /// Reference stiffness used for adimensional scaling: isotropic with the
    /// mean Young's modulus of the two phases and the soft-phase Poisson ratio.
    /// Depends only on the phase parameters, never on a realized structure.
    pub fn reference_stiffness(&self) -> Result<SymTensor4> {
        isotropic_stiffness(0.5 * (self.e1 + self.e2()), self.nu1)
    }
}

/// Per-voxel stress `σ = C:ε` and energy density `w = ε:C:ε`.
pub fn constitutive(strain: &Field, stiffness: &StiffnessField) -> Result<(Field, Vec<f64>)> {
    ensure!(strain.channels() == 6, Shape, "strain field needs 6 channels, has {}", strain.channels());
    ensure!(
        strain.grid() == stiffness.grid(),
        Shape,
        "strain grid {} vs stiffness grid {}",
        strain.grid(),
        stiffness.grid()
    );
    let n = strain.voxels();
    let mut stress = Field::zeros(6, strain.grid());
    let mut energy = vec![0.0; n];
    for v in 0..n {
        let e = strain.tensor_at(v);
        let s = stiffness.at(v).apply(&e);
        energy[v] = e.dot(&s);
        stress.set_tensor(v, &s);
    }
    Ok((stress, energy))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EquivalentKind {
    /// Factor 3/2.
    Stress,
    /// Factor 2/3.
    Strain,
}

/// Deviatoric part and von Mises equivalent scalar of a tensor field.
pub fn equivalent_measures(t: &Field, kind: EquivalentKind) -> Result<(Field, Vec<f64>)> {
    ensure!(t.channels() == 6, Shape, "tensor field needs 6 channels, has {}", t.channels());
    let n = t.voxels();
    let factor = match kind {
        EquivalentKind::Stress => 1.5,
        EquivalentKind::Strain => 2.0 / 3.0,
    };
    let mut dev = Field::zeros(6, t.grid());
    let mut eq = vec![0.0; n];
    for v in 0..n {
        let d = t.tensor_at(v).deviator();
        eq[v] = (factor * d.dot(&d)).sqrt();
        dev.set_tensor(v, &d);
    }
    Ok((dev, eq))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantity {
    Strain,
    Stiffness,
    Stress,
    Energy,
}

/// Adimensional scaling factors: strains by `‖ε̄‖`, stiffness by `‖C⁰‖_F`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScaleSet {
    pub strain_scale: f64,
    pub stiff_scale: f64,
}

impl ScaleSet {
    pub fn new(eps_bar: &SymTensor2, reference: &SymTensor4) -> Result<Self> {
        let strain_scale = eps_bar.norm();
        let stiff_scale = reference.frobenius_norm();
        ensure!(
            strain_scale > 0.0 && strain_scale.is_finite(),
            InvalidArgument,
            "average strain has zero norm"
        );
        ensure!(
            stiff_scale > 0.0 && stiff_scale.is_finite(),
            InvalidArgument,
            "reference stiffness has zero norm"
        );
        Ok(Self {
            strain_scale,
            stiff_scale,
        })
    }

    /// Scales for a sample: only the loading and the phase parameters enter.
    pub fn for_phases(eps_bar: &SymTensor2, params: &PhaseParams) -> Result<Self> {
        Self::new(eps_bar, &params.reference_stiffness()?)
    }

    pub fn stress_scale(&self) -> f64 {
        self.stiff_scale * self.strain_scale
    }

    /// `‖C⁰‖_F ‖ε̄‖²`, the dimensionally consistent energy scale.
    pub fn energy_scale(&self) -> f64 {
        self.stiff_scale * self.strain_scale * self.strain_scale
    }

    pub fn factor(&self, q: Quantity) -> f64 {
        match q {
            Quantity::Strain => self.strain_scale,
            Quantity::Stiffness => self.stiff_scale,
            Quantity::Stress => self.stress_scale(),
            Quantity::Energy => self.energy_scale(),
        }
    }

    pub fn scale(&self, x: f64, q: Quantity) -> f64 {
        x / self.factor(q)
    }

    pub fn unscale(&self, x: f64, q: Quantity) -> f64 {
        x * self.factor(q)
    }

    pub fn scale_field(&self, f: &Field, q: Quantity) -> Field {
        let k = 1.0 / self.factor(q);
        let mut out = f.clone();
        out.data_mut().iter_mut().for_each(|x| *x *= k);
        out
    }

    pub fn unscale_field(&self, f: &Field, q: Quantity) -> Field {
        let k = self.factor(q);
        let mut out = f.clone();
        out.data_mut().iter_mut().for_each(|x| *x *= k);
        out
    }

    pub fn scale_stiffness(&self, c: &StiffnessField) -> StiffnessField {
        c.scaled(1.0 / self.stiff_scale)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Grid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sym(rng: &mut impl Rng) -> [[f64; 3]; 3] {
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in i..3 {
                let x = rng.random_range(-1.0..1.0);
                m[i][j] = x;
                m[j][i] = x;
            }
        }
        m
    }

    fn random_minor_sym(rng: &mut impl Rng) -> [[[[f64; 3]; 3]; 3]; 3] {
        let mut t = [[[[0.0; 3]; 3]; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    for l in 0..3 {
                        let v = rng.random_range(-1.0..1.0);
                        // fill all four minor-symmetric copies from one draw
                        if i <= j && k <= l {
                            t[i][j][k][l] = v;
                            t[j][i][k][l] = v;
                            t[i][j][l][k] = v;
                            t[j][i][l][k] = v;
                        }
                    }
                }
            }
        }
        t
    }

    fn ddot2(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> f64 {
        (0..3).flat_map(|i| (0..3).map(move |j| a[i][j] * b[i][j])).sum()
    }

    fn contract42(c: &[[[[f64; 3]; 3]; 3]; 3], e: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
        let mut s = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    for l in 0..3 {
                        s[i][j] += c[i][j][k][l] * e[k][l];
                    }
                }
            }
        }
        s
    }

    #[test]
    fn shear_component_carries_sqrt2() {
        let mut m = [[0.0; 3]; 3];
        m[0][1] = 1.0;
        m[1][0] = 1.0;
        let v = SymTensor2::from_matrix(&m).unwrap();
        assert_eq!(v.0, [0.0, 0.0, 0.0, 0.0, 0.0, SQRT_2]);
        assert!((v.norm() - SQRT_2).abs() < 1e-15);
        assert_eq!(SymTensor2::from_matrix(&[[0.0; 3]; 3]).unwrap(), SymTensor2::ZERO);
    }

    #[test]
    fn rejects_non_symmetric() {
        let m = [[1.0, 2.0, 0.0], [2.1, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(SymTensor2::from_matrix(&m).is_err());
        let mut t = [[[[0.0; 3]; 3]; 3]; 3];
        t[0][1][0][0] = 1.0;
        assert!(SymTensor4::from_tensor(&t).is_err());
    }

    #[test]
    fn inner_product_and_contraction_match_index_notation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let a = random_sym(&mut rng);
            let b = random_sym(&mut rng);
            let va = SymTensor2::from_matrix(&a).unwrap();
            let vb = SymTensor2::from_matrix(&b).unwrap();
            assert!((va.dot(&vb) - ddot2(&a, &b)).abs() < 1e-12);
            for (x, y) in va.to_matrix().iter().flatten().zip(a.iter().flatten()) {
                assert!((x - y).abs() <= 2.0 * f64::EPSILON * y.abs());
            }

            let c = random_minor_sym(&mut rng);
            let mc = SymTensor4::from_tensor(&c).unwrap();
            let direct = SymTensor2::from_matrix(&contract42(&c, &a)).unwrap();
            let via = mc.apply(&va);
            for k in 0..6 {
                assert!((direct.0[k] - via.0[k]).abs() < 1e-12);
            }
            let back = mc.to_tensor();
            for (x, y) in back.iter().flatten().flatten().flatten().zip(c.iter().flatten().flatten().flatten()) {
                assert!((x - y).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn isotropic_values() {
        let c = isotropic_stiffness(120.0, 0.3).unwrap();
        assert!((c.0[0][0] - 161.538_461_538_461_5).abs() < 1e-9);
        let unit = isotropic_stiffness(1.0, 0.0).unwrap();
        assert_eq!(unit, SymTensor4::identity());
        assert!(isotropic_stiffness(1.0, 0.5).is_err());
        assert!(isotropic_stiffness(-1.0, 0.2).is_err());
        for &(e, nu) in &[(1.0, -0.9), (3.0, 0.0), (120.0, 0.3), (5e4, 0.49)] {
            assert!(isotropic_stiffness(e, nu).unwrap().min_eigenvalue() > 0.0);
        }
    }

    #[test]
    fn constitutive_identity_and_zero() {
        let g = Grid::cubic(4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..6 * g.voxels()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let eps = Field::from_vec(6, g, data).unwrap();
        let id = StiffnessField::uniform(SymTensor4::identity(), g);
        let (s, w) = constitutive(&eps, &id).unwrap();
        assert_eq!(s, eps);
        for v in 0..g.voxels() {
            let e = eps.tensor_at(v);
            assert!((w[v] - e.dot(&e)).abs() < 1e-14);
        }
        let (s0, w0) = constitutive(&Field::zeros(6, g), &id).unwrap();
        assert!(s0.data().iter().all(|&x| x == 0.0));
        assert!(w0.iter().all(|&x| x == 0.0));
        assert!(constitutive(&Field::zeros(6, Grid::cubic(2)), &id).is_err());
    }

    #[test]
    fn equivalent_stress_cases() {
        let p = SymTensor2::identity().scaled(7.0);
        assert!(p.deviator().norm() < 1e-15);
        assert!(p.equivalent_stress() < 1e-14);
        let tau = 2.5;
        let shear = SymTensor2::from_matrix(&[[0.0, tau, 0.0], [tau, 0.0, 0.0], [0.0, 0.0, 0.0]]).unwrap();
        assert!((shear.equivalent_stress() - 3f64.sqrt() * tau).abs() < 1e-13);
        assert!((SymTensor2::uniaxial_xx(4.0).equivalent_stress() - 4.0).abs() < 1e-13);
        let d = SymTensor2([1.0, 2.0, -0.5, 0.3, 0.1, 0.0]).deviator();
        assert!(d.trace().abs() < 1e-15);
    }

    #[test]
    fn scaling_roundtrip_and_consistency() {
        let eps_bar = SymTensor2::uniaxial_xx(0.001);
        let params = PhaseParams::with_contrast(100.0);
        let s = ScaleSet::for_phases(&eps_bar, &params).unwrap();
        let g = Grid::cubic(4);
        let f = Field::constant_tensor(&eps_bar, g);
        let fs = s.scale_field(&f, Quantity::Strain);
        for v in 0..g.voxels() {
            assert!((fs.tensor_at(v).norm() - 1.0).abs() < 1e-14);
        }
        let back = s.unscale_field(&fs, Quantity::Strain);
        assert!(back.max_abs_diff(&f) < 1e-18);

        let c = params.hard().unwrap();
        let e = SymTensor2([0.001, -0.0003, 0.0002, 0.0001, 0.0, 0.0004]);
        let sigma = c.apply(&e);
        let cs = c.scaled(1.0 / s.stiff_scale);
        let es = e.scaled(1.0 / s.strain_scale);
        let lhs = cs.apply(&es);
        for k in 0..6 {
            assert!((lhs.0[k] - s.scale(sigma.0[k], Quantity::Stress)).abs() < 1e-12);
        }
        let w = e.dot(&sigma);
        assert!((es.dot(&lhs) - s.scale(w, Quantity::Energy)).abs() < 1e-12);
        assert!(ScaleSet::new(&SymTensor2::ZERO, &c).is_err());
    }
}
